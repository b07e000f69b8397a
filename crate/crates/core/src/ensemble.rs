//! Inference rules over the dropout ensemble.
//!
//! The exact rules weight every mask equally, which is the ensemble induced
//! by inclusion probability 1/2 on every hidden unit. The renormalised
//! geometric mean of the members' predictive distributions equals the
//! squashed arithmetic mean of their logits, so geometric averaging works
//! in logit space throughout.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, shape, Error, Result};
use crate::masks::{sample_sizes, MaskPolicy, MaskSpace};
use crate::model::{output_distribution, squash, ModelParams, OutputKind};

/// Default cap on maskable units for the geometric enumerators.
pub const GEOMETRIC_MAX_BITS: usize = 24;
/// Default cap for the arithmetic enumerator with a sigmoid output.
pub const ARITHMETIC_MAX_BITS: usize = 20;
/// Default cap for the arithmetic enumerator with a softmax output.
pub const ARITHMETIC_SOFTMAX_MAX_BITS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnsembleRule {
    WeightScaled,
    ExactGeometric,
    ExactArithmetic,
    MonteCarloGeometric(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    pub probs: Vec<f64>,
    pub rule: EnsembleRule,
}

/// Weight-scaling inference: one unmasked pass with each hidden layer's
/// output multiplied by its inclusion probability.
pub fn weight_scaled_forward(
    params: &ModelParams,
    v: &[f64],
    policy: &MaskPolicy,
) -> Result<EnsemblePrediction> {
    let logits = params.forward_scaled(v, policy.inclusion())?;
    Ok(EnsemblePrediction {
        probs: output_distribution(&logits, params.output_kind)?,
        rule: EnsembleRule::WeightScaled,
    })
}

/// Exact geometric mean over every mask, by direct enumeration.
pub fn exact_geometric(
    params: &ModelParams,
    v: &[f64],
    space: &MaskSpace,
) -> Result<EnsemblePrediction> {
    exact_geometric_capped(params, v, space, GEOMETRIC_MAX_BITS)
}

pub fn exact_geometric_capped(
    params: &ModelParams,
    v: &[f64],
    space: &MaskSpace,
    max_bits: usize,
) -> Result<EnsemblePrediction> {
    let engine = Engine::new(params, v, space, max_bits)?;
    let n_hidden = params.n_hidden_layers();
    let mut words = Vec::with_capacity(n_hidden);
    let mut sum = vec![0.0; params.arch.output_dim];
    let mut bufs = Buffers::default();
    let total = space.total_masks()?;
    for index in 0..total {
        space.layer_words(index, &mut words);
        let act = engine.prefix_activation(&words, n_hidden - 1, &mut bufs);
        engine.add_masked_logits(act, words[n_hidden - 1], &mut sum);
    }
    finish_geometric(params, sum, total)
}

/// Exact geometric mean that enumerates only the masks of the hidden layers
/// before the last one. The output is linear in the last layer's mask, so
/// averaging over it just halves that layer's activations.
pub fn factorized_geometric(
    params: &ModelParams,
    v: &[f64],
    space: &MaskSpace,
) -> Result<EnsemblePrediction> {
    factorized_geometric_capped(params, v, space, GEOMETRIC_MAX_BITS)
}

pub fn factorized_geometric_capped(
    params: &ModelParams,
    v: &[f64],
    space: &MaskSpace,
    max_bits: usize,
) -> Result<EnsemblePrediction> {
    let engine = Engine::new(params, v, space, max_bits)?;
    let n_hidden = params.n_hidden_layers();
    let prefix = MaskSpace::new(space.hidden_sizes()[..n_hidden - 1].to_vec());
    let total = prefix.total_masks()?;
    let mut words = Vec::with_capacity(n_hidden);
    let mut sum = vec![0.0; params.arch.output_dim];
    let mut logits = Vec::new();
    let mut halved = Vec::new();
    let mut bufs = Buffers::default();
    for index in 0..total {
        prefix.layer_words(index, &mut words);
        let act = engine.prefix_activation(&words, n_hidden - 1, &mut bufs);
        halved.clear();
        halved.extend(act.iter().map(|a| 0.5 * a));
        params.output_layer().affine_into(&halved, &mut logits);
        for (s, z) in sum.iter_mut().zip(&logits) {
            *s += z;
        }
    }
    finish_geometric(params, sum, total)
}

fn finish_geometric(params: &ModelParams, mut sum: Vec<f64>, total: u64) -> Result<EnsemblePrediction> {
    let scale = 1.0 / total as f64;
    sum.iter_mut().for_each(|s| *s *= scale);
    Ok(EnsemblePrediction {
        probs: output_distribution(&sum, params.output_kind)?,
        rule: EnsembleRule::ExactGeometric,
    })
}

/// Exact arithmetic mean of the members' predictive distributions.
///
/// Earlier hidden layers' masks are enumerated directly. For each of them
/// the last layer's masks are walked in Gray-code order so that each step
/// changes the running logits by a single unit's contribution.
pub fn exact_arithmetic(
    params: &ModelParams,
    v: &[f64],
    space: &MaskSpace,
) -> Result<EnsemblePrediction> {
    let cap = match params.output_kind {
        OutputKind::Sigmoid => ARITHMETIC_MAX_BITS,
        OutputKind::Softmax => ARITHMETIC_SOFTMAX_MAX_BITS,
    };
    exact_arithmetic_capped(params, v, space, cap)
}

pub fn exact_arithmetic_capped(
    params: &ModelParams,
    v: &[f64],
    space: &MaskSpace,
    max_bits: usize,
) -> Result<EnsemblePrediction> {
    let engine = Engine::new(params, v, space, max_bits)?;
    let n_hidden = params.n_hidden_layers();
    let prefix = MaskSpace::new(space.hidden_sizes()[..n_hidden - 1].to_vec());
    let n_last = space.hidden_sizes()[n_hidden - 1];
    let out = params.output_layer();
    let n_out = out.fan_out;
    let mut words = Vec::with_capacity(n_hidden);
    let mut bufs = Buffers::default();
    let last_total = 1u64 << n_last;

    let mut acc = vec![0.0; params.n_classes()];
    let mut contrib = vec![0.0; n_last * n_out];
    let mut running = vec![0.0; n_out];
    for index in 0..prefix.total_masks()? {
        prefix.layer_words(index, &mut words);
        let act = engine.prefix_activation(&words, n_hidden - 1, &mut bufs);
        for (j, &a) in act.iter().enumerate() {
            for k in 0..n_out {
                contrib[j * n_out + k] = out.weight(k, j) * a;
            }
        }
        running.copy_from_slice(&out.biases);
        match params.output_kind {
            OutputKind::Sigmoid => {
                let mut z = running[0];
                let mut p1 = crate::model::sigmoid(z);
                let mut gray = 0u64;
                for step in 1..last_total {
                    let bit = step.trailing_zeros() as usize;
                    gray ^= 1 << bit;
                    if gray >> bit & 1 == 1 {
                        z += contrib[bit];
                    } else {
                        z -= contrib[bit];
                    }
                    p1 += crate::model::sigmoid(z);
                }
                acc[1] += p1;
            }
            OutputKind::Softmax => {
                let mut add = |r: &[f64]| {
                    for (a, p) in acc.iter_mut().zip(squash(r, OutputKind::Softmax)) {
                        *a += p;
                    }
                };
                add(&running);
                let mut gray = 0u64;
                for step in 1..last_total {
                    let bit = step.trailing_zeros() as usize;
                    gray ^= 1 << bit;
                    let sign = if gray >> bit & 1 == 1 { 1.0 } else { -1.0 };
                    for (r, c) in running.iter_mut().zip(&contrib[bit * n_out..(bit + 1) * n_out]) {
                        *r += sign * c;
                    }
                    add(&running);
                }
            }
        }
    }
    let total = space.total_masks()? as f64;
    let probs = match params.output_kind {
        OutputKind::Sigmoid => {
            let p1 = acc[1] / total;
            vec![1.0 - p1, p1]
        }
        OutputKind::Softmax => acc.into_iter().map(|a| a / total).collect(),
    };
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("arithmetic ensemble probability".into()));
    }
    Ok(EnsemblePrediction {
        probs,
        rule: EnsembleRule::ExactArithmetic,
    })
}

/// Squashed mean logit over `n_samples` independently drawn masks.
pub fn monte_carlo_geometric<R: rand::Rng + ?Sized>(
    params: &ModelParams,
    v: &[f64],
    policy: &MaskPolicy,
    n_samples: usize,
    rng: &mut R,
) -> Result<EnsemblePrediction> {
    if n_samples == 0 {
        return Err(invalid("n_samples must be at least 1"));
    }
    if policy.n_layers() != params.n_hidden_layers() {
        return Err(shape(format!(
            "policy has {} layers, model has {} hidden layers",
            policy.n_layers(),
            params.n_hidden_layers()
        )));
    }
    let mut sum = vec![0.0; params.arch.output_dim];
    for _ in 0..n_samples {
        let mask = sample_sizes(policy, &params.arch.hidden_sizes, rng);
        let trace = params.forward(v, Some(&mask))?;
        for (s, z) in sum.iter_mut().zip(&trace.output_logits) {
            *s += z;
        }
    }
    sum.iter_mut().for_each(|s| *s /= n_samples as f64);
    Ok(EnsemblePrediction {
        probs: output_distribution(&sum, params.output_kind)?,
        rule: EnsembleRule::MonteCarloGeometric(n_samples),
    })
}

/// Per-input precomputation shared by the enumerators.
struct Engine<'a> {
    params: &'a ModelParams,
    /// Unmasked output of hidden layer 0; it does not depend on any mask.
    first: Vec<f64>,
}

#[derive(Default)]
struct Buffers {
    cur: Vec<f64>,
    z: Vec<f64>,
}

impl<'a> Engine<'a> {
    fn new(params: &'a ModelParams, v: &[f64], space: &MaskSpace, max_bits: usize) -> Result<Self> {
        if space.hidden_sizes() != params.arch.hidden_sizes.as_slice() {
            return Err(shape(format!(
                "mask space {:?} does not match hidden sizes {:?}",
                space.hidden_sizes(),
                params.arch.hidden_sizes
            )));
        }
        if space.n_bits() > max_bits {
            return Err(Error::TooLarge {
                bits: space.n_bits(),
                cap: max_bits,
            });
        }
        if v.len() != params.arch.input_dim {
            return Err(shape(format!(
                "input has length {}, model expects {}",
                v.len(),
                params.arch.input_dim
            )));
        }
        let mut z = Vec::new();
        params.layers[0].affine_into(v, &mut z);
        let first = z.iter().map(|&z| params.activation.apply(z)).collect();
        Ok(Self { params, first })
    }

    /// Unmasked output of hidden layer `k`, with the masks in `words`
    /// applied to layers `0..k`.
    fn prefix_activation<'b>(&'b self, words: &[u64], k: usize, bufs: &'b mut Buffers) -> &'b [f64] {
        if k == 0 {
            return &self.first;
        }
        bufs.cur.clear();
        bufs.cur.extend_from_slice(&self.first);
        for (l, &word) in words.iter().enumerate().take(k) {
            let layer = &self.params.layers[l + 1];
            bufs.z.clear();
            for i in 0..layer.fan_out {
                let row = layer.row(i);
                let mut z = layer.biases[i];
                for (j, (&w, &h)) in row.iter().zip(&bufs.cur).enumerate() {
                    if word >> j & 1 == 1 {
                        z += w * h;
                    }
                }
                bufs.z.push(self.params.activation.apply(z));
            }
            std::mem::swap(&mut bufs.cur, &mut bufs.z);
        }
        &bufs.cur
    }

    /// Adds the output logits of the last hidden layer masked by `word`.
    fn add_masked_logits(&self, act: &[f64], word: u64, sum: &mut [f64]) {
        let out = self.params.output_layer();
        for (k, s) in sum.iter_mut().enumerate() {
            let row = out.row(k);
            let mut z = out.biases[k];
            for (j, (&w, &h)) in row.iter().zip(act).enumerate() {
                if word >> j & 1 == 1 {
                    z += w * h;
                }
            }
            *s += z;
        }
    }
}

/// Rule selector for batch evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum InferenceRule {
    WeightScaled(MaskPolicy),
    /// Naive enumeration of every mask.
    ExactGeometric,
    /// Same result as `ExactGeometric` at a fraction of the cost.
    FactorizedGeometric,
    ExactArithmetic,
    /// Each example gets its own stream derived from `seed` and its row.
    MonteCarloGeometric {
        policy: MaskPolicy,
        n_samples: usize,
        seed: u64,
    },
}

impl InferenceRule {
    pub fn name(&self) -> &'static str {
        match self {
            InferenceRule::WeightScaled(_) => "weight_scaled",
            InferenceRule::ExactGeometric | InferenceRule::FactorizedGeometric => "exact_geometric",
            InferenceRule::ExactArithmetic => "exact_arithmetic",
            InferenceRule::MonteCarloGeometric { .. } => "mc_geometric",
        }
    }

    pub fn predict(&self, params: &ModelParams, v: &[f64], row: usize) -> Result<EnsemblePrediction> {
        let space = || MaskSpace::new(params.arch.hidden_sizes.clone());
        match self {
            InferenceRule::WeightScaled(policy) => weight_scaled_forward(params, v, policy),
            InferenceRule::ExactGeometric => exact_geometric(params, v, &space()),
            InferenceRule::FactorizedGeometric => factorized_geometric(params, v, &space()),
            InferenceRule::ExactArithmetic => exact_arithmetic(params, v, &space()),
            InferenceRule::MonteCarloGeometric {
                policy,
                n_samples,
                seed,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(row as u64);
                monte_carlo_geometric(params, v, policy, *n_samples, &mut rng)
            }
        }
    }
}

/// Predicts every example of `data` (or its first `limit` rows), in row
/// order. Rows are evaluated in parallel; each row's result does not depend
/// on the number of workers.
pub fn predict_batch(
    params: &ModelParams,
    data: &Dataset,
    rule: &InferenceRule,
    limit: Option<usize>,
) -> Result<Vec<Vec<f64>>> {
    let n = limit.map_or(data.len(), |l| l.min(data.len()));
    (0..n)
        .into_par_iter()
        .map(|i| rule.predict(params, data.row(i), i).map(|p| p.probs))
        .collect()
}

/// Writes `example_id,rule,p_class1[,p_class2,...]` rows; column
/// `p_class{k}` holds the probability of class index `k - 1`.
pub fn write_predictions_csv<W: Write>(
    out: W,
    rule: &str,
    example_ids: &[usize],
    probs: &[Vec<f64>],
) -> Result<()> {
    let n_classes = probs.first().map_or(0, Vec::len);
    let mut writer = csv::Writer::from_writer(out);
    let mut header = vec!["example_id".to_string(), "rule".to_string()];
    header.extend((1..=n_classes).map(|k| format!("p_class{k}")));
    writer.write_record(&header).map_err(csv_err)?;
    for (id, p) in example_ids.iter().zip(probs) {
        let mut record = vec![id.to_string(), rule.to_string()];
        record.extend(p.iter().map(|x| x.to_string()));
        writer.write_record(&record).map_err(csv_err)?;
    }
    writer.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format {
        what: "csv output",
        reason: e.to_string(),
    }
}
