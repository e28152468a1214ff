//! Reference encoder: a small pre-layer-norm transformer mapping a feature
//! window to its hidden matrix, plus the parameter store shared by the span
//! head and the answerability classifier, and a finite-difference gradient
//! verification harness.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, NodeId, Tape};
use crate::error::{Error, Result};
use crate::seeds::rng_for;
use crate::textproc::FeatureWindow;

/// Architecture of the reference encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    /// Hidden size d.
    pub hidden_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq_len: usize,
}

impl EncoderConfig {
    /// Default reference architecture: 2 layers, 4 heads, d = 64.
    pub fn reference(vocab_size: usize, max_seq_len: usize) -> Self {
        EncoderConfig {
            vocab_size,
            hidden_size: 64,
            layers: 2,
            heads: 4,
            max_seq_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.hidden_size % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} must be a positive multiple of {} heads",
                self.hidden_size, self.heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config("vocabulary must include the specials".into()));
        }
        Ok(())
    }

    fn ff_size(&self) -> usize {
        4 * self.hidden_size
    }
}

/// Hidden states for one window.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `l * d` contextual representations, one row per sequence position
    /// (padding rows included).
    pub hidden: Matrix,
    /// Number of non-padding rows.
    pub valid_len: usize,
}

const INIT_STD: f64 = 0.02;

/// All trainable tensors, in a stable named order.
///
/// Covers the encoder, the span head vectors, and (when enabled) the
/// answerability classifier.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: EncoderConfig,
    pub with_classifier: bool,
    tensors: Vec<(String, Matrix)>,
    index: HashMap<String, usize>,
}

fn tensor_layout(config: &EncoderConfig, with_classifier: bool) -> Vec<(String, usize, usize)> {
    let d = config.hidden_size;
    let ff = config.ff_size();
    let mut layout = vec![
        ("embed.tokens".to_string(), config.vocab_size, d),
        ("embed.positions".to_string(), config.max_seq_len, d),
    ];
    for l in 0..config.layers {
        for (suffix, rows, cols) in [
            ("ln1.gain", 1, d),
            ("ln1.bias", 1, d),
            ("attn.wq", d, d),
            ("attn.bq", 1, d),
            ("attn.wk", d, d),
            ("attn.bk", 1, d),
            ("attn.wv", d, d),
            ("attn.bv", 1, d),
            ("attn.wo", d, d),
            ("attn.bo", 1, d),
            ("ln2.gain", 1, d),
            ("ln2.bias", 1, d),
            ("ff.w1", d, ff),
            ("ff.b1", 1, ff),
            ("ff.w2", ff, d),
            ("ff.b2", 1, d),
        ] {
            layout.push((format!("layer{l}.{suffix}"), rows, cols));
        }
    }
    layout.push(("final_ln.gain".to_string(), 1, d));
    layout.push(("final_ln.bias".to_string(), 1, d));
    layout.push(("span.ws".to_string(), d, 1));
    layout.push(("span.we".to_string(), d, 1));
    if with_classifier {
        layout.push(("cls.w".to_string(), d, 1));
        layout.push(("cls.b".to_string(), 1, 1));
    }
    layout
}

impl ModelParams {
    /// Seeded initialization: weight matrices and embeddings from
    /// N(0, 0.02^2); layer-norm gains start at 1, all biases at 0.
    pub fn init(config: EncoderConfig, with_classifier: bool, seed: u64) -> Result<ModelParams> {
        config.validate()?;
        let mut rng = rng_for(seed, "init");
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut tensors = Vec::new();
        for (name, rows, cols) in tensor_layout(&config, with_classifier) {
            let value = if name.ends_with(".gain") {
                Matrix::ones((rows, cols))
            } else if name.ends_with(".bias") || name.starts_with("cls.b") || name.contains(".b") {
                Matrix::zeros((rows, cols))
            } else {
                Matrix::from_shape_fn((rows, cols), |_| normal.sample(&mut rng))
            };
            tensors.push((name, value));
        }
        Ok(ModelParams::from_tensors(config, with_classifier, tensors))
    }

    pub(crate) fn from_tensors(
        config: EncoderConfig,
        with_classifier: bool,
        tensors: Vec<(String, Matrix)>,
    ) -> ModelParams {
        let index = tensors
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        ModelParams {
            config,
            with_classifier,
            tensors,
            index,
        }
    }

    pub fn tensor(&self, name: &str) -> &Matrix {
        &self.tensors[self.index[name]].1
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.tensors.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn tensor_count(&self) -> usize {
        self.tensors.len()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|(_, v)| v.len()).sum()
    }

    /// Read one coordinate by tensor index and row-major offset.
    pub fn coord(&self, tensor: usize, offset: usize) -> f64 {
        let m = &self.tensors[tensor].1;
        m[(offset / m.ncols(), offset % m.ncols())]
    }

    pub fn set_coord(&mut self, tensor: usize, offset: usize, value: f64) {
        let m = &mut self.tensors[tensor].1;
        let cols = m.ncols();
        m[(offset / cols, offset % cols)] = value;
    }

    pub fn tensor_name(&self, tensor: usize) -> &str {
        &self.tensors[tensor].0
    }

    pub fn tensor_len(&self, tensor: usize) -> usize {
        self.tensors[tensor].1.len()
    }

    /// In-place SGD-style update: `value -= delta` per tensor.
    pub fn apply_deltas(&mut self, deltas: &[Matrix]) {
        assert_eq!(deltas.len(), self.tensors.len());
        for ((_, value), delta) in self.tensors.iter_mut().zip(deltas) {
            *value -= delta;
        }
    }

    /// Register every tensor on a tape. `trainable` controls whether
    /// gradients flow into them.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let ids = self
            .tensors
            .iter()
            .map(|(_, v)| {
                if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        BoundParams {
            ids,
            index: self.index.clone(),
        }
    }
}

/// Tape leaves for one registration of the parameters.
pub struct BoundParams {
    ids: Vec<NodeId>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> NodeId {
        self.ids[self.index[name]]
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

/// Run the transformer over a window that is already on a tape.
///
/// Returns the node holding the `l * d` hidden matrix. Padding positions are
/// excluded from attention; a window with `valid_len == 0` attends everywhere
/// so its (unused) output stays finite.
pub fn encode_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &EncoderConfig,
    input_ids: &[u32],
    valid_len: usize,
) -> Result<NodeId> {
    let l = input_ids.len();
    if l == 0 {
        return Err(Error::Input("empty window".into()));
    }
    if l > config.max_seq_len {
        return Err(Error::Input(format!(
            "window length {l} exceeds max_seq_len {}",
            config.max_seq_len
        )));
    }
    let mut rows = Vec::with_capacity(l);
    for &id in input_ids {
        if id as usize >= config.vocab_size {
            return Err(Error::Input(format!(
                "input id {id} outside vocabulary of size {}",
                config.vocab_size
            )));
        }
        rows.push(id as usize);
    }

    let tok = tape.gather(bound.get("embed.tokens"), rows);
    let pos = tape.gather(bound.get("embed.positions"), (0..l).collect());
    let mut x = tape.add(tok, pos);

    let d = config.hidden_size;
    let heads = config.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    for layer in 0..config.layers {
        let p = |suffix: &str| format!("layer{layer}.{suffix}");
        let n1 = {
            let gain = bound.get(&p("ln1.gain"));
            let bias = bound.get(&p("ln1.bias"));
            tape.layer_norm(x, gain, bias)
        };
        let project = |tape: &mut Tape, input: NodeId, w: &str, b: &str| {
            let prod = tape.matmul(input, bound.get(&p(w)));
            tape.add_row(prod, bound.get(&p(b)))
        };
        let q = project(tape, n1, "attn.wq", "attn.bq");
        let k = project(tape, n1, "attn.wk", "attn.bk");
        let v = project(tape, n1, "attn.wv", "attn.bv");

        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scaled = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scaled, valid_len);
            head_outputs.push(tape.matmul(attn, vh));
        }
        let ctx = tape.concat_cols(&head_outputs);
        let attn_out = {
            let prod = tape.matmul(ctx, bound.get(&p("attn.wo")));
            tape.add_row(prod, bound.get(&p("attn.bo")))
        };
        x = tape.add(x, attn_out);

        let n2 = {
            let gain = bound.get(&p("ln2.gain"));
            let bias = bound.get(&p("ln2.bias"));
            tape.layer_norm(x, gain, bias)
        };
        let h1 = {
            let prod = tape.matmul(n2, bound.get(&p("ff.w1")));
            let biased = tape.add_row(prod, bound.get(&p("ff.b1")));
            tape.gelu(biased)
        };
        let ff_out = {
            let prod = tape.matmul(h1, bound.get(&p("ff.w2")));
            tape.add_row(prod, bound.get(&p("ff.b2")))
        };
        x = tape.add(x, ff_out);
    }

    let gain = bound.get("final_ln.gain");
    let bias = bound.get("final_ln.bias");
    Ok(tape.layer_norm(x, gain, bias))
}

/// Encode one window without tracking gradients.
pub fn encode(params: &ModelParams, window: &FeatureWindow) -> Result<EncoderOutput> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let valid_len = window.valid_len();
    let h = encode_on_tape(
        &mut tape,
        &bound,
        &params.config,
        &window.input_ids,
        valid_len,
    )?;
    Ok(EncoderOutput {
        hidden: tape.value(h).clone(),
        valid_len,
    })
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification
// ---------------------------------------------------------------------------

/// Settings for `finite_difference_check`.
#[derive(Debug, Clone)]
pub struct FdOptions {
    /// Central-difference step.
    pub step: f64,
    /// Number of parameter coordinates to probe (at least; capped by the
    /// total parameter count).
    pub coords: usize,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            step: 1e-5,
            coords: 200,
            seed: 17,
            tolerance: 1e-4,
        }
    }
}

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub worst_offset: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

impl FdReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

fn fd_rel_err(analytic: f64, numeric: f64) -> f64 {
    // central differences bottom out around 1e-9 in f64; treat coordinates
    // where both sides sit below that as agreeing
    if analytic.abs() < 1e-8 && numeric.abs() < 1e-8 {
        return 0.0;
    }
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compare analytic gradients against central finite differences on a random
/// subset of parameter coordinates.
///
/// `grad_fn` evaluates the loss and its gradients (one matrix per tensor, in
/// parameter order) at a parameter point; `value_fn` evaluates the loss only.
pub fn finite_difference_check(
    params: &ModelParams,
    value_fn: &dyn Fn(&ModelParams) -> Result<f64>,
    grad_fn: &dyn Fn(&ModelParams) -> Result<(f64, Vec<Matrix>)>,
    opts: &FdOptions,
) -> Result<FdReport> {
    let (base_loss, grads) = grad_fn(params)?;
    if !base_loss.is_finite() {
        return Err(Error::GradCheck(format!("non-finite loss {base_loss}")));
    }
    if grads.len() != params.tensor_count() {
        return Err(Error::GradCheck(format!(
            "expected {} gradient tensors, got {}",
            params.tensor_count(),
            grads.len()
        )));
    }

    let total: usize = (0..params.tensor_count()).map(|t| params.tensor_len(t)).sum();
    let want = opts.coords.min(total);
    let mut rng = rng_for(opts.seed, "fd-check");
    let mut chosen = std::collections::HashSet::new();
    while chosen.len() < want {
        chosen.insert(rng.gen_range(0..total));
    }
    let mut coords: Vec<usize> = chosen.into_iter().collect();
    coords.sort_unstable();

    let mut work = params.clone();
    let mut report = FdReport {
        checked: coords.len(),
        max_rel_err: 0.0,
        worst_tensor: String::new(),
        worst_offset: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };

    for flat in coords {
        // locate (tensor, offset) for the flat coordinate
        let mut tensor = 0usize;
        let mut offset = flat;
        while offset >= params.tensor_len(tensor) {
            offset -= params.tensor_len(tensor);
            tensor += 1;
        }
        let original = work.coord(tensor, offset);
        work.set_coord(tensor, offset, original + opts.step);
        let plus = value_fn(&work)?;
        work.set_coord(tensor, offset, original - opts.step);
        let minus = value_fn(&work)?;
        work.set_coord(tensor, offset, original);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::GradCheck("non-finite loss during probing".into()));
        }

        let numeric = (plus - minus) / (2.0 * opts.step);
        let g = &grads[tensor];
        let analytic = g[(offset / g.ncols(), offset % g.ncols())];
        let err = fd_rel_err(analytic, numeric);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_tensor = params.tensor_name(tensor).to_string();
            report.worst_offset = offset;
            report.analytic_at_worst = analytic;
            report.numeric_at_worst = numeric;
        }
    }
    Ok(report)
}

/// Convenience: zero gradients shaped like the parameters.
pub fn zero_grads(params: &ModelParams) -> Vec<Matrix> {
    params
        .tensors()
        .map(|(_, v)| Matrix::zeros(v.raw_dim()))
        .collect()
}

/// Collect leaf gradients from a finished backward pass into parameter order,
/// adding into `acc`.
pub fn accumulate_bound_grads(
    acc: &mut [Matrix],
    grads: &crate::autodiff::Gradients,
    bound: &BoundParams,
) {
    for (i, id) in bound.ids().iter().enumerate() {
        if let Some(g) = grads.get(*id) {
            acc[i] += g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textproc::{CLS_ID, PAD_ID, SEP_ID};

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 16,
            hidden_size: 8,
            layers: 2,
            heads: 2,
            max_seq_len: 16,
        }
    }

    fn window(ids: Vec<u32>) -> FeatureWindow {
        FeatureWindow {
            input_ids: ids,
            passage_token_offset: 2,
            label_span: (0, 0),
            window_start: 0,
            slice_len: 0,
        }
    }

    #[test]
    fn output_shape_matches_window() {
        let params = ModelParams::init(
            EncoderConfig {
                hidden_size: 32,
                heads: 4,
                ..tiny_config()
            },
            false,
            3,
        )
        .unwrap();
        let w = window(vec![CLS_ID, 5, 6, SEP_ID, 7, 8, 9, 10, 11, 12, 13, 14, 15, 4, 5, SEP_ID]);
        let out = encode(&params, &w).unwrap();
        assert_eq!(out.hidden.dim(), (16, 32));
        assert_eq!(out.valid_len, 16);
        assert!(out.hidden.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encoding_is_bitwise_deterministic() {
        let params = ModelParams::init(tiny_config(), false, 11).unwrap();
        let w = window(vec![CLS_ID, 4, 5, SEP_ID, 6, 7, SEP_ID]);
        let a = encode(&params, &w).unwrap();
        let b = encode(&params, &w).unwrap();
        for (x, y) in a.hidden.iter().zip(b.hidden.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn all_pad_window_is_defined() {
        let params = ModelParams::init(tiny_config(), false, 5).unwrap();
        let w = window(vec![PAD_ID; 6]);
        assert_eq!(w.valid_len(), 0);
        let out = encode(&params, &w).unwrap();
        assert_eq!(out.valid_len, 0);
        assert!(out.hidden.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn padding_tail_does_not_change_valid_rows() {
        let params = ModelParams::init(tiny_config(), false, 7).unwrap();
        let content = vec![CLS_ID, 4, 9, SEP_ID, 6, 7, 8, SEP_ID];
        let short = window(content.clone());
        let mut padded_ids = content.clone();
        padded_ids.extend([PAD_ID; 4]);
        let padded = window(padded_ids);
        let a = encode(&params, &short).unwrap();
        let b = encode(&params, &padded).unwrap();
        assert_eq!(b.valid_len, content.len());
        for r in 0..content.len() {
            for c in 0..8 {
                assert_eq!(a.hidden[(r, c)].to_bits(), b.hidden[(r, c)].to_bits());
            }
        }
    }

    #[test]
    fn out_of_range_id_is_input_error() {
        let params = ModelParams::init(tiny_config(), false, 2).unwrap();
        let w = window(vec![CLS_ID, 99, SEP_ID]);
        assert!(matches!(encode(&params, &w), Err(Error::Input(_))));
    }

    #[test]
    fn heads_must_divide_hidden_size() {
        let bad = EncoderConfig {
            hidden_size: 10,
            heads: 4,
            ..tiny_config()
        };
        assert!(ModelParams::init(bad, false, 1).is_err());
    }

    #[test]
    fn classifier_tensors_only_when_enabled() {
        let without = ModelParams::init(tiny_config(), false, 1).unwrap();
        let with = ModelParams::init(tiny_config(), true, 1).unwrap();
        assert_eq!(with.tensor_count(), without.tensor_count() + 2);
        assert_eq!(with.tensor("cls.w").dim(), (8, 1));
        assert_eq!(with.tensor("cls.b").dim(), (1, 1));
    }

    #[test]
    fn fd_constant_loss_reports_zero_error() {
        let params = ModelParams::init(tiny_config(), false, 9).unwrap();
        let report = finite_difference_check(
            &params,
            &|_| Ok(4.25),
            &|p| Ok((4.25, zero_grads(p))),
            &FdOptions {
                coords: 50,
                ..FdOptions::default()
            },
        )
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
        assert_eq!(report.checked, 50);
    }

    #[test]
    fn fd_catches_a_wrong_gradient() {
        let params = ModelParams::init(tiny_config(), false, 13).unwrap();
        // loss = sum of first tensor entries, but claimed gradient is zero
        let value = |p: &ModelParams| Ok(p.tensor("embed.tokens").sum());
        let grad = |p: &ModelParams| Ok((p.tensor("embed.tokens").sum(), zero_grads(p)));
        let report = finite_difference_check(
            &params,
            &value,
            &grad,
            &FdOptions {
                coords: 400,
                ..FdOptions::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_err > 0.9);
    }

    #[test]
    fn fd_passes_on_encoder_row_sum_loss() {
        // drive the full transformer stack through the check
        let params = ModelParams::init(tiny_config(), false, 21).unwrap();
        let ids = vec![CLS_ID, 4, 5, SEP_ID, 6, 7, SEP_ID];
        let weights: Vec<f64> = (0..8).map(|i| 0.3 * (i as f64) - 1.0).collect();

        let eval = |p: &ModelParams, want_grad: bool| -> Result<(f64, Vec<Matrix>)> {
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape, want_grad);
            let h = encode_on_tape(&mut tape, &bound, &p.config, &ids, ids.len())?;
            let w = tape.constant(
                Matrix::from_shape_vec((8, 1), weights.clone()).unwrap(),
            );
            let col = tape.matmul(h, w);
            let pick = tape.gather(col, vec![1, 4]);
            let ones = tape.constant(Matrix::ones((1, 2)));
            let loss = tape.matmul(ones, pick);
            let value = tape.scalar(loss);
            let grads = if want_grad {
                let g = tape.backward(loss);
                let mut acc = zero_grads(p);
                accumulate_bound_grads(&mut acc, &g, &bound);
                acc
            } else {
                Vec::new()
            };
            Ok((value, grads))
        };

        let report = finite_difference_check(
            &params,
            &|p| eval(p, false).map(|(v, _)| v),
            &|p| eval(p, true),
            &FdOptions {
                coords: 300,
                ..FdOptions::default()
            },
        )
        .unwrap();
        assert!(
            report.passes(1e-4),
            "max rel err {} at {}[{}] (analytic {}, numeric {})",
            report.max_rel_err,
            report.worst_tensor,
            report.worst_offset,
            report.analytic_at_worst,
            report.numeric_at_worst
        );
    }
}
