//! Answer-span representations, cosine similarity, the span-level
//! contrastive loss, the combined objective, and the representation-mode
//! ablation (span vs `[CLS]` vs both).

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, NodeId, Tape};
use crate::encoder::{BoundParams, ModelParams};
use crate::error::{Error, Result};

/// Loss mixing weights and the contrastive temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.5,
            lambda2: 0.5,
            tau: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("temperature {} must be positive", self.tau)));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Which representation feeds the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepresentationMode {
    /// Concatenated hidden states at the answer span.
    Span,
    /// The `[CLS]` hidden state, with an auxiliary answerability classifier.
    Cls,
    /// Both losses summed; the classifier is also enabled.
    Both,
}

impl RepresentationMode {
    pub fn needs_classifier(self) -> bool {
        !matches!(self, RepresentationMode::Span)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RepresentationMode::Span => "span",
            RepresentationMode::Cls => "cls",
            RepresentationMode::Both => "both",
        }
    }
}

impl std::str::FromStr for RepresentationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "span" => Ok(RepresentationMode::Span),
            "cls" => Ok(RepresentationMode::Cls),
            "both" => Ok(RepresentationMode::Both),
            other => Err(Error::Config(format!(
                "unknown representation mode '{other}' (expected span|cls|both)"
            ))),
        }
    }
}

/// Concatenation of the hidden rows at the span boundaries: `[h_ys; h_ye]`.
pub fn span_representation(
    hidden: ArrayView2<f64>,
    y_start: usize,
    y_end: usize,
    valid_len: usize,
) -> Result<Vec<f64>> {
    if y_start >= valid_len || y_end >= valid_len || y_start >= hidden.nrows() || y_end >= hidden.nrows() {
        return Err(Error::Input(format!(
            "span positions ({y_start}, {y_end}) outside valid length {valid_len}"
        )));
    }
    let mut z = Vec::with_capacity(2 * hidden.ncols());
    z.extend(hidden.row(y_start).iter());
    z.extend(hidden.row(y_end).iter());
    Ok(z)
}

/// `u . v / (|u| |v|)`; errors on zero-norm inputs.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu < 1e-12 || nv < 1e-12 {
        return Err(Error::Degenerate("zero-norm representation".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(dot / (nu * nv))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Two-term contrastive softmax from precomputed similarities:
/// `-log( e^{phi_pos/tau} / (e^{phi_pos/tau} + e^{phi_neg/tau}) )`,
/// evaluated as a stable softplus of the scaled similarity gap.
pub fn spancl_from_similarities(phi_pos: f64, phi_neg: f64, tau: f64) -> f64 {
    softplus((phi_neg - phi_pos) / tau)
}

/// Contrastive loss over the three span representations.
pub fn spancl_loss(z_org: &[f64], z_pos: &[f64], z_neg: &[f64], tau: f64) -> Result<f64> {
    let phi_pos = cosine_similarity(z_org, z_pos)?;
    let phi_neg = cosine_similarity(z_org, z_neg)?;
    Ok(spancl_from_similarities(phi_pos, phi_neg, tau))
}

/// `lambda1 * L_span + lambda2 * L_spanCL`.
pub fn combined_loss(l_span: f64, l_spancl: f64, weights: &LossWeights) -> f64 {
    weights.lambda1 * l_span + weights.lambda2 * l_spancl
}

/// Linear answerability score on the `[CLS]` hidden state. Only meaningful
/// in `cls` and `both` modes.
pub fn answerability_logit(
    hidden: ArrayView2<f64>,
    params: &ModelParams,
    mode: RepresentationMode,
) -> Result<f64> {
    if !mode.needs_classifier() {
        return Err(Error::Config(
            "answerability head is disabled in span mode".into(),
        ));
    }
    if !params.with_classifier {
        return Err(Error::Config(
            "model was built without the answerability classifier".into(),
        ));
    }
    let w = params.tensor("cls.w");
    let b = params.tensor("cls.b")[(0, 0)];
    let logit: f64 = hidden
        .row(0)
        .iter()
        .zip(w.iter())
        .map(|(h, w)| h * w)
        .sum::<f64>()
        + b;
    Ok(logit)
}

/// Binary cross-entropy of an answerability logit against the flag.
pub fn answerability_bce(logit: f64, answerable: bool) -> f64 {
    let y = f64::from(answerable);
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

// ---------------------------------------------------------------------------
// Tape builders
// ---------------------------------------------------------------------------

/// `[h_ys; h_ye]` as a `(2d, 1)` column on the tape.
pub fn span_representation_on_tape(
    tape: &mut Tape,
    hidden: NodeId,
    y_start: usize,
    y_end: usize,
) -> NodeId {
    let rows = tape.gather(hidden, vec![y_start, y_end]);
    tape.flatten(rows)
}

/// The `[CLS]` row as a `(d, 1)` column on the tape.
pub fn cls_representation_on_tape(tape: &mut Tape, hidden: NodeId) -> NodeId {
    let row = tape.gather(hidden, vec![0]);
    tape.flatten(row)
}

/// Differentiable two-term contrastive loss; also returns the similarity
/// nodes so callers can log the margin.
pub struct SpanClNodes {
    pub loss: NodeId,
    pub phi_pos: NodeId,
    pub phi_neg: NodeId,
}

pub fn spancl_on_tape(
    tape: &mut Tape,
    z_org: NodeId,
    z_pos: NodeId,
    z_neg: NodeId,
    tau: f64,
) -> Result<SpanClNodes> {
    let phi_pos = tape.cosine(z_org, z_pos)?;
    let phi_neg = tape.cosine(z_org, z_neg)?;
    let gap = tape.sub(phi_neg, phi_pos);
    let scaled = tape.scale(gap, 1.0 / tau);
    let loss = tape.softplus(scaled);
    Ok(SpanClNodes {
        loss,
        phi_pos,
        phi_neg,
    })
}

/// Differentiable answerability logit: `h_0 . w + b`.
pub fn answerability_logit_on_tape(tape: &mut Tape, hidden: NodeId, bound: &BoundParams) -> NodeId {
    let cls = tape.gather(hidden, vec![0]);
    let prod = tape.matmul(cls, bound.get("cls.w"));
    tape.add(prod, bound.get("cls.b"))
}

/// Contrastive loss value for one triple of hidden matrices under a mode,
/// computed without a tape (used by oracles and diagnostics).
#[allow(clippy::too_many_arguments)]
pub fn contrastive_loss_value(
    h_org: &Matrix,
    span_org: (usize, usize),
    h_pos: &Matrix,
    span_pos: (usize, usize),
    h_neg: &Matrix,
    span_neg: (usize, usize),
    mode: RepresentationMode,
    tau: f64,
) -> Result<f64> {
    let span_term = |()| -> Result<f64> {
        let zo = span_representation(h_org.view(), span_org.0, span_org.1, h_org.nrows())?;
        let zp = span_representation(h_pos.view(), span_pos.0, span_pos.1, h_pos.nrows())?;
        let zn = span_representation(h_neg.view(), span_neg.0, span_neg.1, h_neg.nrows())?;
        spancl_loss(&zo, &zp, &zn, tau)
    };
    let cls_term = |()| -> Result<f64> {
        let zo: Vec<f64> = h_org.row(0).to_vec();
        let zp: Vec<f64> = h_pos.row(0).to_vec();
        let zn: Vec<f64> = h_neg.row(0).to_vec();
        spancl_loss(&zo, &zp, &zn, tau)
    };
    match mode {
        RepresentationMode::Span => span_term(()),
        RepresentationMode::Cls => cls_term(()),
        RepresentationMode::Both => Ok(span_term(())? + cls_term(())?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::LN_2;

    #[test]
    fn span_representation_concatenates_rows() {
        let h = Matrix::from_shape_vec((3, 2), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let z = span_representation(h.view(), 1, 2, 3).unwrap();
        assert_eq!(z, vec![3.0, 4.0, 5.0, 6.0]);
        let same = span_representation(h.view(), 1, 1, 3).unwrap();
        assert_eq!(same, vec![3.0, 4.0, 3.0, 4.0]);
        assert!(span_representation(h.view(), 1, 3, 3).is_err());
        assert!(span_representation(h.view(), 2, 2, 2).is_err());
    }

    #[test]
    fn cosine_basic_values() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap().abs() < 1e-12);
        let v = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((v - 1.0 / 2.0f64.sqrt()).abs() < 1e-12);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn spancl_fixed_points() {
        // equal similarities give ln 2 at any temperature
        for tau in [0.02, 0.05, 1.0] {
            assert!((spancl_from_similarities(0.3, 0.3, tau) - LN_2).abs() < 1e-9);
        }
        // strongly separated similarities at tau = 0.05
        let tiny = spancl_from_similarities(1.0, 0.0, 0.05);
        assert!((tiny - (1.0 + (-20.0f64).exp()).ln()).abs() < 1e-15);
        assert!(tiny < 3e-9);
        // inverted similarities at tau = 1
        let inv = spancl_from_similarities(0.0, 1.0, 1.0);
        assert!((inv - (1.0 + std::f64::consts::E).ln()).abs() < 1e-12);
        assert!((inv - 1.3132616875182228).abs() < 1e-12);
    }

    #[test]
    fn spancl_monotone_in_positive_similarity() {
        let tau = 0.1;
        let mut last = f64::INFINITY;
        for k in 0..20 {
            let phi_pos = -1.0 + 0.1 * k as f64;
            let loss = spancl_from_similarities(phi_pos, 0.0, tau);
            assert!(loss < last);
            assert!(loss > 0.0);
            last = loss;
        }
    }

    #[test]
    fn lower_temperature_sharpens() {
        // with phi_pos > phi_neg, smaller tau means smaller loss
        let mut last = f64::INFINITY;
        for tau in [1.0, 0.5, 0.1, 0.05, 0.02] {
            let loss = spancl_from_similarities(0.8, 0.2, tau);
            assert!(loss < last);
            last = loss;
        }
    }

    #[test]
    fn combined_loss_points() {
        let w = LossWeights::default();
        let v = combined_loss(2.0 * LN_2, LN_2, &w);
        assert!((v - 1.5 * LN_2).abs() < 1e-12);
        assert!((v - 1.0397207708399179).abs() < 1e-12);
        assert_eq!(combined_loss(0.0, 0.0, &w), 0.0);
        let span_only = LossWeights {
            lambda2: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(combined_loss(3.0, 100.0, &span_only), 1.5);
    }

    #[test]
    fn answerability_head_mode_rules() {
        let config = crate::encoder::EncoderConfig {
            vocab_size: 8,
            hidden_size: 4,
            layers: 1,
            heads: 1,
            max_seq_len: 8,
        };
        let with = ModelParams::init(config.clone(), true, 1).unwrap();
        let without = ModelParams::init(config, false, 1).unwrap();
        let h = Matrix::ones((3, 4));
        assert!(matches!(
            answerability_logit(h.view(), &with, RepresentationMode::Span),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            answerability_logit(h.view(), &without, RepresentationMode::Cls),
            Err(Error::Config(_))
        ));
        let logit = answerability_logit(h.view(), &with, RepresentationMode::Cls).unwrap();
        assert!(logit.is_finite());
    }

    #[test]
    fn zero_classifier_weights_give_ln2_bce() {
        assert!((answerability_bce(0.0, true) - LN_2).abs() < 1e-12);
        assert!((answerability_bce(0.0, false) - LN_2).abs() < 1e-12);
    }

    #[test]
    fn both_mode_is_sum_of_terms() {
        let mut rng = crate::seeds::rng_for(5, "both-mode");
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            Matrix::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0))
        };
        let (ho, hp, hn) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let spans = ((2, 3), (1, 2), (2, 2));
        let tau = 0.05;
        let span = contrastive_loss_value(
            &ho, spans.0, &hp, spans.1, &hn, spans.2, RepresentationMode::Span, tau,
        )
        .unwrap();
        let cls = contrastive_loss_value(
            &ho, spans.0, &hp, spans.1, &hn, spans.2, RepresentationMode::Cls, tau,
        )
        .unwrap();
        let both = contrastive_loss_value(
            &ho, spans.0, &hp, spans.1, &hn, spans.2, RepresentationMode::Both, tau,
        )
        .unwrap();
        assert!((both - (span + cls)).abs() < 1e-12);
    }

    #[test]
    fn tape_spancl_matches_pure_and_its_gradients_check_out() {
        let mut rng = crate::seeds::rng_for(6, "spancl-fd");
        let dims = 6;
        let zo: Vec<f64> = (0..dims).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let zp: Vec<f64> = (0..dims).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let zn: Vec<f64> = (0..dims).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tau = 0.05;
        let pure = spancl_loss(&zo, &zp, &zn, tau).unwrap();

        let run = |zo: &[f64], zp: &[f64], zn: &[f64]| -> (f64, Vec<Vec<f64>>) {
            let mut tape = Tape::new();
            let col = |tape: &mut Tape, v: &[f64]| {
                tape.param(Matrix::from_shape_vec((v.len(), 1), v.to_vec()).unwrap())
            };
            let (o, p, n) = (col(&mut tape, zo), col(&mut tape, zp), col(&mut tape, zn));
            let nodes = spancl_on_tape(&mut tape, o, p, n, tau).unwrap();
            let value = tape.scalar(nodes.loss);
            let grads = tape.backward(nodes.loss);
            let take = |id| -> Vec<f64> {
                grads.get(id).map(|m| m.iter().cloned().collect()).unwrap_or_default()
            };
            (value, vec![take(o), take(p), take(n)])
        };

        let (value, grads) = run(&zo, &zp, &zn);
        assert!((value - pure).abs() < 1e-12);

        // central differences on every coordinate of every z
        let step = 1e-6;
        let vecs = [zo.clone(), zp.clone(), zn.clone()];
        for (vi, g) in grads.iter().enumerate() {
            for k in 0..dims {
                let mut plus = vecs.clone();
                let mut minus = vecs.clone();
                plus[vi][k] += step;
                minus[vi][k] -= step;
                let lp = spancl_loss(&plus[0], &plus[1], &plus[2], tau).unwrap();
                let lm = spancl_loss(&minus[0], &minus[1], &minus[2], tau).unwrap();
                let numeric = (lp - lm) / (2.0 * step);
                let rel = (g[k] - numeric).abs() / g[k].abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "z{vi}[{k}]: analytic {} numeric {numeric}", g[k]);
            }
        }
    }

    proptest! {
        #[test]
        fn spancl_is_scale_invariant(c in 0.01f64..100.0, seed in 0u64..1000) {
            let mut rng = crate::seeds::rng_for(seed, "scale-inv");
            let z: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let base = spancl_loss(&z[0], &z[1], &z[2], 0.05);
            prop_assume!(base.is_ok());
            let scaled: Vec<Vec<f64>> = z
                .iter()
                .map(|v| v.iter().map(|x| x * c).collect())
                .collect();
            let scaled_loss = spancl_loss(&scaled[0], &scaled[1], &scaled[2], 0.05).unwrap();
            prop_assert!((base.unwrap() - scaled_loss).abs() < 1e-9);
        }
    }
}
