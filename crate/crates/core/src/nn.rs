//! Small multilayer perceptrons with selectable normalization.
//!
//! The interesting piece is [`batch_norm`] in `Weighted` mode: batch
//! statistics become weighted means and variances, so samples with weight
//! zero contribute nothing to normalization. A handful of identities pin
//! the semantics down and are enforced by tests:
//!
//! - uniform weights reproduce standard batch normalization exactly;
//! - weights that are 1 on a clean subset and 0 elsewhere reproduce
//!   standard batch normalization computed on the clean subset alone.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::{Tape, TensorData, Var};
use crate::error::{Error, Result};

/// Which normalization the hidden layers apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    /// No normalization layer at all.
    #[serde(rename = "nbn")]
    None,
    /// Standard batch normalization with running statistics.
    #[serde(rename = "bn")]
    Batch,
    /// Batch statistics in training, but running statistics are never
    /// written; evaluation sees the initial (0, 1) statistics.
    #[serde(rename = "fbn")]
    Frozen,
    /// Batch statistics weighted per sample.
    #[serde(rename = "wbn")]
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Train-time forwards use batch statistics; eval-time forwards use the
/// stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Architecture description: `layer_widths` runs input → hidden… → output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layer_widths: Vec<usize>,
    pub norm_mode: NormMode,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::Config(format!(
                "model.layer_widths needs at least input and output widths, got {:?}",
                self.layer_widths
            )));
        }
        if let Some(w) = self.layer_widths.iter().find(|w| **w == 0) {
            return Err(Error::Config(format!("model.layer_widths contains zero width {w}")));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn hidden_count(&self) -> usize {
        self.layer_widths.len().saturating_sub(2)
    }

    fn has_norm(&self) -> bool {
        self.norm_mode != NormMode::None
    }
}

/// Running statistics of one normalization layer. Not parameters: they are
/// never differentiated, only written from batch statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl NormState {
    pub fn new(dim: usize) -> Self {
        Self {
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }
}

/// Fresh running statistics for every hidden layer of `spec`.
pub fn init_norm_states(spec: &ModelSpec) -> Vec<NormState> {
    (0..spec.hidden_count()).map(|i| NormState::new(spec.layer_widths[i + 1])).collect()
}

/// Named parameter tensors in a fixed order (layer by layer).
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    entries: Vec<(String, TensorData)>,
}

/// The same parameters held as tape variables, aligned with [`Params`]
/// entry order.
pub struct ParamVars<'t> {
    entries: Vec<(String, Var<'t>)>,
}

impl Params {
    pub fn from_entries(entries: Vec<(String, TensorData)>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[(String, TensorData)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Enters every tensor as a differentiable leaf on `tape`.
    pub fn to_vars<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        ParamVars {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), tape.var(t.clone())))
                .collect(),
        }
    }

    /// In-place gradient step `p ← p − α g`, with `grads` aligned to entry
    /// order.
    pub fn sgd_step(&mut self, alpha: f64, grads: &[TensorData]) -> Result<()> {
        if grads.len() != self.entries.len() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                lhs: vec![self.entries.len()],
                rhs: vec![grads.len()],
            });
        }
        for ((name, p), g) in self.entries.iter_mut().zip(grads) {
            if p.shape != g.shape {
                return Err(Error::ShapeMismatch {
                    op: "sgd_step",
                    lhs: p.shape.clone(),
                    rhs: g.shape.clone(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { context: format!("gradient for {name}") });
            }
            for (pv, gv) in p.data.iter_mut().zip(&g.data) {
                *pv -= alpha * gv;
            }
        }
        Ok(())
    }

    /// Convex blend `self ← decay·self + (1−decay)·other`, used by the
    /// moving-average teacher.
    pub fn ema_blend(&mut self, decay: f64, other: &Params) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::ShapeMismatch {
                op: "ema_blend",
                lhs: vec![self.entries.len()],
                rhs: vec![other.entries.len()],
            });
        }
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x = decay * *x + (1.0 - decay) * *y;
            }
        }
        Ok(())
    }

    /// Serializes to a flat JSON object `{name: {shape, values}}` with
    /// deterministic (sorted) key order. Values survive bit-for-bit.
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Entry<'a> {
            shape: &'a [usize],
            values: &'a [f64],
        }
        let map: BTreeMap<&str, Entry<'_>> = self
            .entries
            .iter()
            .map(|(n, t)| (n.as_str(), Entry { shape: &t.shape, values: &t.data }))
            .collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    /// Reads a checkpoint produced by [`Params::to_json`]. Entry order is
    /// re-derived from `spec`, so a checkpoint only loads against the
    /// architecture that wrote it.
    pub fn from_json(spec: &ModelSpec, text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Entry {
            shape: Vec<usize>,
            values: Vec<f64>,
        }
        let mut map: BTreeMap<String, Entry> = serde_json::from_str(text)?;
        let template = init_params(spec, 0)?;
        let mut entries = Vec::with_capacity(template.entries.len());
        for (name, proto) in &template.entries {
            let e = map.remove(name).ok_or_else(|| {
                Error::Config(format!("checkpoint is missing parameter {name}"))
            })?;
            if e.shape != proto.shape {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint_load",
                    lhs: e.shape,
                    rhs: proto.shape.clone(),
                });
            }
            entries.push((name.clone(), TensorData::new(e.shape, e.values)));
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Config(format!("checkpoint has unknown parameter {extra}")));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(spec: &ModelSpec, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(spec, &text)
    }
}

impl<'t> ParamVars<'t> {
    pub fn get(&self, name: &str) -> Option<Var<'t>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// All parameter variables in entry order, for gradient calls.
    pub fn vars(&self) -> Vec<Var<'t>> {
        self.entries.iter().map(|(_, v)| *v).collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// On-tape gradient step: returns new parameter variables
    /// `p − α g`. Because the step is recorded, anything computed from the
    /// result can be differentiated through the step.
    pub fn step_on_tape(&self, alpha: f64, grads: &[Var<'t>]) -> Result<ParamVars<'t>> {
        if grads.len() != self.entries.len() {
            return Err(Error::ShapeMismatch {
                op: "step_on_tape",
                lhs: vec![self.entries.len()],
                rhs: vec![grads.len()],
            });
        }
        let mut entries = Vec::with_capacity(self.entries.len());
        for ((name, p), g) in self.entries.iter().zip(grads) {
            let tape = p.tape();
            let scaled = g.mul(&tape.scalar(alpha))?;
            entries.push((name.clone(), p.sub(&scaled)?));
        }
        Ok(ParamVars { entries })
    }

    /// Copies current values back into a detached [`Params`].
    pub fn to_params(&self) -> Params {
        Params {
            entries: self.entries.iter().map(|(n, v)| (n.clone(), v.value())).collect(),
        }
    }
}

/// Xavier-uniform initialization, deterministic in `seed`. Biases start at
/// zero; normalization scales at one, offsets at zero.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<Params> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let n_layers = spec.layer_widths.len() - 1;
    for i in 0..n_layers {
        let (fan_in, fan_out) = (spec.layer_widths[i], spec.layer_widths[i + 1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
        entries.push((format!("layer{i}.weight"), TensorData::matrix(fan_in, fan_out, w)));
        entries.push((format!("layer{i}.bias"), TensorData::vector(vec![0.0; fan_out])));
        let is_hidden = i + 1 < n_layers;
        if is_hidden && spec.has_norm() {
            entries.push((format!("layer{i}.gamma"), TensorData::vector(vec![1.0; fan_out])));
            entries.push((format!("layer{i}.beta"), TensorData::vector(vec![0.0; fan_out])));
        }
    }
    Ok(Params { entries })
}

/// One batch-normalization layer in any of the three normalizing modes.
///
/// In `Weighted` mode with per-sample weights `w` the batch statistics are
///   mean = Σ wᵢ xᵢ / Σ wᵢ,   var = Σ wᵢ (xᵢ − mean)² / Σ wᵢ  (biased),
/// and the output is `γ (x − mean) / sqrt(var + ε) + β`. Running
/// statistics blend toward the (weighted) batch statistics with the
/// state's momentum; `Frozen` never writes them. Eval always normalizes by
/// the stored running statistics.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<'t>(
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    state: &mut NormState,
    mode: NormMode,
    phase: Phase,
    weights: Option<Var<'t>>,
    update_running: bool,
) -> Result<Var<'t>> {
    let tape = x.tape();
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch { op: "batch_norm", lhs: shape, rhs: vec![0, 0] });
    }
    let (m, d) = (shape[0], shape[1]);
    if mode == NormMode::None {
        return Ok(x);
    }

    let (mean, var) = match phase {
        Phase::Eval => (
            tape.constant(TensorData::vector(state.running_mean.clone())),
            tape.constant(TensorData::vector(state.running_var.clone())),
        ),
        Phase::Train => match (mode, weights) {
            (NormMode::Weighted, Some(w)) => {
                if w.len() != m {
                    return Err(Error::ShapeMismatch {
                        op: "batch_norm",
                        lhs: vec![m],
                        rhs: w.shape(),
                    });
                }
                let negative = w.with_data(|d| d.iter().any(|v| *v < 0.0));
                if negative {
                    return Err(Error::Domain {
                        op: "batch_norm",
                        msg: "negative sample weight".into(),
                    });
                }
                let total = w.sum_all();
                if total.scalar_value() <= 0.0 {
                    return Err(Error::Domain {
                        op: "batch_norm",
                        msg: "sample weights sum to zero".into(),
                    });
                }
                let wcol = w.reshape(&[m, 1])?;
                let mean = wcol.mul(&x)?.sum(Some(0))?.div(&total)?;
                let centered = x.sub(&mean.broadcast_to(&[m, d])?)?;
                let var = wcol
                    .mul(&centered.mul(&centered)?)?
                    .sum(Some(0))?
                    .div(&total)?;
                (mean, var)
            }
            (NormMode::Weighted, None) => {
                // Without weights the weighted statistics reduce to the
                // uniform ones; reuse the plain path.
                plain_batch_stats(x, m)?
            }
            (_, _) => {
                if m < 2 {
                    return Err(Error::Domain {
                        op: "batch_norm",
                        msg: format!("batch statistics need at least 2 samples, got {m}"),
                    });
                }
                plain_batch_stats(x, m)?
            }
        },
    };

    if phase == Phase::Train
        && update_running
        && matches!(mode, NormMode::Batch | NormMode::Weighted)
    {
        let bm = mean.value();
        let bv = var.value();
        for j in 0..d {
            state.running_mean[j] =
                (1.0 - state.momentum) * state.running_mean[j] + state.momentum * bm.data[j];
            state.running_var[j] =
                (1.0 - state.momentum) * state.running_var[j] + state.momentum * bv.data[j];
        }
    }

    let eps = tape.scalar(state.epsilon);
    let denom = var.add(&eps)?.sqrt()?;
    let normed = x
        .sub(&mean.broadcast_to(&[m, d])?)?
        .div(&denom.broadcast_to(&[m, d])?)?;
    normed
        .mul(&gamma.broadcast_to(&[m, d])?)?
        .add(&beta.broadcast_to(&[m, d])?)
}

fn plain_batch_stats<'t>(x: Var<'t>, m: usize) -> Result<(Var<'t>, Var<'t>)> {
    let d = x.shape()[1];
    let mean = x.mean(Some(0))?;
    let centered = x.sub(&mean.broadcast_to(&[m, d])?)?;
    let var = centered.mul(&centered)?.mean(Some(0))?;
    Ok((mean, var))
}

/// Full forward pass: logits for a batch.
///
/// `weights` are per-sample normalization weights, only consulted by
/// `Weighted` normalization during training. `update_running` lets callers
/// run auxiliary forwards (perturbed branches, teacher passes) without
/// disturbing the running statistics.
#[allow(clippy::too_many_arguments)]
pub fn mlp_forward<'t>(
    spec: &ModelSpec,
    params: &ParamVars<'t>,
    norm: &mut [NormState],
    x: Var<'t>,
    phase: Phase,
    weights: Option<Var<'t>>,
    update_running: bool,
) -> Result<Var<'t>> {
    spec.validate()?;
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != spec.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "mlp_forward",
            lhs: shape,
            rhs: vec![0, spec.input_dim()],
        });
    }
    if spec.has_norm() && norm.len() != spec.hidden_count() {
        return Err(Error::Config(format!(
            "expected {} normalization states, got {}",
            spec.hidden_count(),
            norm.len()
        )));
    }
    let m = shape[0];
    let n_layers = spec.layer_widths.len() - 1;
    let missing = |name: &str| Error::Config(format!("missing parameter {name}"));

    let mut h = x;
    for i in 0..n_layers {
        let w = params
            .get(&format!("layer{i}.weight"))
            .ok_or_else(|| missing(&format!("layer{i}.weight")))?;
        let b = params
            .get(&format!("layer{i}.bias"))
            .ok_or_else(|| missing(&format!("layer{i}.bias")))?;
        let out_dim = spec.layer_widths[i + 1];
        h = h.matmul(&w)?.add(&b.broadcast_to(&[m, out_dim])?)?;
        let is_hidden = i + 1 < n_layers;
        if !is_hidden {
            break;
        }
        if spec.has_norm() {
            let gamma = params
                .get(&format!("layer{i}.gamma"))
                .ok_or_else(|| missing(&format!("layer{i}.gamma")))?;
            let beta = params
                .get(&format!("layer{i}.beta"))
                .ok_or_else(|| missing(&format!("layer{i}.beta")))?;
            h = batch_norm(
                h,
                gamma,
                beta,
                &mut norm[i],
                spec.norm_mode,
                phase,
                weights,
                update_running,
            )?;
        }
        h = match spec.activation {
            Activation::Tanh => h.tanh(),
            Activation::Relu => h.relu(),
        };
    }
    Ok(h)
}

/// Row-wise argmax with ties resolved to the lowest index.
pub fn argmax_rows(logits: &TensorData) -> Vec<usize> {
    assert_eq!(logits.rank(), 2, "argmax expects a matrix of logits");
    let (m, c) = (logits.shape[0], logits.shape[1]);
    (0..m)
        .map(|i| {
            let row = &logits.data[i * c..(i + 1) * c];
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Eval-mode class predictions from detached parameters.
pub fn predict_classes(
    spec: &ModelSpec,
    params: &Params,
    norm: &[NormState],
    x: &TensorData,
) -> Result<Vec<usize>> {
    let tape = Tape::new();
    let pv = params.to_vars(&tape);
    let mut norm_copy = norm.to_vec();
    let xin = tape.constant(x.clone());
    let logits = mlp_forward(spec, &pv, &mut norm_copy, xin, Phase::Eval, None, false)?;
    Ok(argmax_rows(&logits.value()))
}

/// Fraction of rows whose predicted class matches `labels`.
pub fn accuracy(
    spec: &ModelSpec,
    params: &Params,
    norm: &[NormState],
    x: &TensorData,
    labels: &[usize],
) -> Result<f64> {
    let pred = predict_classes(spec, params, norm, x)?;
    if pred.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "accuracy",
            lhs: vec![pred.len()],
            rhs: vec![labels.len()],
        });
    }
    if labels.is_empty() {
        return Err(Error::Domain { op: "accuracy", msg: "empty evaluation set".into() });
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}
