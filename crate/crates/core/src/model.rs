//! Feedforward rectifier networks.
//!
//! Weights are stored row-major with shape `(fan_out, fan_in)`, so row `i`
//! of a layer holds the incoming weights of unit `i`. Dropout masks act on
//! hidden-layer outputs only; the input layer is never masked.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::masks::DropoutMask;

/// Current version of the binary model format.
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    /// A single logistic unit; predictions are reported as `[1 - p, p]`.
    Sigmoid,
    Softmax,
}

impl OutputKind {
    fn code(self) -> u8 {
        match self {
            OutputKind::Sigmoid => 0,
            OutputKind::Softmax => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(OutputKind::Sigmoid),
            1 => Some(OutputKind::Softmax),
            _ => None,
        }
    }
}

/// Hidden-unit nonlinearity. `Identity` exists so that linear networks can
/// be built for checking exact identities; it is never persisted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Rectifier,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Rectifier => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Identity => z,
        }
    }

    /// Derivative, with the rectifier's subgradient at 0 taken to be 0.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Rectifier => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub output_dim: usize,
    pub output_kind: OutputKind,
}

impl Architecture {
    pub fn new(
        input_dim: usize,
        hidden_sizes: Vec<usize>,
        output_dim: usize,
        output_kind: OutputKind,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(invalid("input and output dimensions must be at least 1"));
        }
        if hidden_sizes.is_empty() {
            return Err(invalid("at least one hidden layer is required"));
        }
        if hidden_sizes.iter().any(|&h| h == 0) {
            return Err(invalid("zero-sized hidden layer"));
        }
        match output_kind {
            OutputKind::Sigmoid if output_dim != 1 => {
                return Err(invalid("sigmoid output requires exactly one output unit"))
            }
            OutputKind::Softmax if output_dim < 2 => {
                return Err(invalid("softmax output requires at least two classes"))
            }
            _ => {}
        }
        Ok(Self {
            input_dim,
            hidden_sizes,
            output_dim,
            output_kind,
        })
    }

    /// A binary classifier with one sigmoid output unit.
    pub fn binary(input_dim: usize, hidden_sizes: Vec<usize>) -> Result<Self> {
        Self::new(input_dim, hidden_sizes, 1, OutputKind::Sigmoid)
    }

    /// Picks a sigmoid output for two classes and softmax otherwise.
    pub fn classifier(input_dim: usize, hidden_sizes: Vec<usize>, n_classes: usize) -> Result<Self> {
        if n_classes == 2 {
            Self::binary(input_dim, hidden_sizes)
        } else {
            Self::new(input_dim, hidden_sizes, n_classes, OutputKind::Softmax)
        }
    }

    /// Number of entries in the predictive distribution.
    pub fn n_classes(&self) -> usize {
        match self.output_kind {
            OutputKind::Sigmoid => 2,
            OutputKind::Softmax => self.output_dim,
        }
    }

    /// `(fan_in, fan_out)` of every weight layer, hidden layers first.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_sizes.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in &self.hidden_sizes {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.output_dim));
        dims
    }

    pub fn n_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Row-major `(fan_out, fan_in)`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl LayerParams {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            fan_in,
            fan_out,
            weights: vec![0.0; fan_in * fan_out],
            biases: vec![0.0; fan_out],
        }
    }

    #[inline]
    pub fn row(&self, unit: usize) -> &[f64] {
        &self.weights[unit * self.fan_in..(unit + 1) * self.fan_in]
    }

    #[inline]
    pub fn weight(&self, unit: usize, input: usize) -> f64 {
        self.weights[unit * self.fan_in + input]
    }

    fn check(&self) -> Result<()> {
        if self.weights.len() != self.fan_in * self.fan_out || self.biases.len() != self.fan_out {
            return Err(shape(format!(
                "layer declared {}x{} holds {} weights and {} biases",
                self.fan_out,
                self.fan_in,
                self.weights.len(),
                self.biases.len()
            )));
        }
        if self.weights.iter().chain(&self.biases).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("layer parameter".into()));
        }
        Ok(())
    }

    /// `out = W x + b`.
    #[inline]
    pub(crate) fn affine_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.biases.iter().enumerate().map(|(i, &b)| {
            let row = self.row(i);
            b + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()
        }));
    }

    fn fill_zero(&mut self) {
        self.weights.iter_mut().for_each(|w| *w = 0.0);
        self.biases.iter_mut().for_each(|b| *b = 0.0);
    }
}

/// Gradients share the parameter layout.
pub type LayerGrads = LayerParams;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrads>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LayerParams::zeros(l.fan_in, l.fan_out))
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        self.layers.iter_mut().for_each(LayerParams::fill_zero);
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
    pub output_kind: OutputKind,
    pub arch: Architecture,
    pub activation: Activation,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `z^(l)` for every hidden layer.
    pub pre_activations: Vec<Vec<f64>>,
    /// `h^(l) = mask_l * f(z^(l))`.
    pub post_activations: Vec<Vec<f64>>,
    pub output_logits: Vec<f64>,
}

/// Per-layer cap on the Euclidean norm of each unit's incoming weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NormConstraintSet {
    caps: Vec<Option<f64>>,
}

impl NormConstraintSet {
    /// One entry per weight layer (hidden layers, then output).
    pub fn new(caps: Vec<Option<f64>>) -> Result<Self> {
        for cap in caps.iter().flatten() {
            if cap.is_nan() || *cap <= 0.0 {
                return Err(invalid(format!("norm cap must be positive, got {cap}")));
            }
        }
        Ok(Self { caps })
    }

    pub fn unconstrained(n_layers: usize) -> Self {
        Self {
            caps: vec![None; n_layers],
        }
    }

    pub fn caps(&self) -> &[Option<f64>] {
        &self.caps
    }

    pub fn is_empty(&self) -> bool {
        self.caps.iter().all(|c| c.map_or(true, f64::is_infinite))
    }
}

// Rows this close above the cap count as already projected, which makes
// projection idempotent despite rounding in the rescale.
const NORM_SLACK: f64 = 1e-12;

impl ModelParams {
    /// Zero-initialised parameters for `arch`.
    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            layers: arch
                .layer_dims()
                .into_iter()
                .map(|(i, o)| LayerParams::zeros(i, o))
                .collect(),
            output_kind: arch.output_kind,
            arch: arch.clone(),
            activation: Activation::Rectifier,
        }
    }

    /// Weights i.i.d. uniform on `[-init_range, init_range]`, biases zero.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, init_range: f64, rng: &mut R) -> Result<Self> {
        if !(init_range > 0.0 && init_range.is_finite()) {
            return Err(invalid(format!("init_range must be positive, got {init_range}")));
        }
        // Re-validate: `arch` may have been built by hand.
        let arch = Architecture::new(
            arch.input_dim,
            arch.hidden_sizes.clone(),
            arch.output_dim,
            arch.output_kind,
        )?;
        let mut params = Self::zeros(&arch);
        for layer in &mut params.layers {
            for w in &mut layer.weights {
                *w = rng.gen_range(-init_range..=init_range);
            }
        }
        Ok(params)
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn n_hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn output_layer(&self) -> &LayerParams {
        self.layers.last().expect("at least one layer")
    }

    pub fn n_classes(&self) -> usize {
        self.arch.n_classes()
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let dims = self.arch.layer_dims();
        if dims.len() != self.layers.len() {
            return Err(shape(format!(
                "architecture has {} weight layers, parameters have {}",
                dims.len(),
                self.layers.len()
            )));
        }
        for (l, (layer, &(fan_in, fan_out))) in self.layers.iter().zip(&dims).enumerate() {
            if layer.fan_in != fan_in || layer.fan_out != fan_out {
                return Err(shape(format!(
                    "layer {l} is {}x{}, architecture expects {fan_out}x{fan_in}",
                    layer.fan_out, layer.fan_in
                )));
            }
            layer.check()?;
        }
        if self.output_kind != self.arch.output_kind {
            return Err(shape("output kind disagrees with architecture"));
        }
        Ok(())
    }

    fn check_input(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.arch.input_dim {
            return Err(shape(format!(
                "input has length {}, model expects {}",
                v.len(),
                self.arch.input_dim
            )));
        }
        Ok(())
    }

    fn check_mask(&self, mask: &DropoutMask) -> Result<()> {
        if mask.sizes().ne(self.arch.hidden_sizes.iter().copied()) {
            return Err(shape(format!(
                "mask layer sizes {:?} do not match hidden sizes {:?}",
                mask.sizes().collect::<Vec<_>>(),
                self.arch.hidden_sizes
            )));
        }
        Ok(())
    }

    /// Forward pass of the sub-network selected by `mask`; `None` keeps
    /// every unit.
    pub fn forward(&self, v: &[f64], mask: Option<&DropoutMask>) -> Result<ForwardTrace> {
        self.check_input(v)?;
        if let Some(mask) = mask {
            self.check_mask(mask)?;
        }
        let n_hidden = self.n_hidden_layers();
        let mut pre_activations = Vec::with_capacity(n_hidden);
        let mut post_activations: Vec<Vec<f64>> = Vec::with_capacity(n_hidden);
        for l in 0..n_hidden {
            let input = if l == 0 { v } else { &post_activations[l - 1] };
            let mut z = Vec::new();
            self.layers[l].affine_into(input, &mut z);
            let h: Vec<f64> = match mask {
                Some(mask) => z
                    .iter()
                    .zip(mask.layer(l))
                    .map(|(&z, &keep)| if keep { self.activation.apply(z) } else { 0.0 })
                    .collect(),
                None => z.iter().map(|&z| self.activation.apply(z)).collect(),
            };
            pre_activations.push(z);
            post_activations.push(h);
        }
        let mut output_logits = Vec::new();
        let last = post_activations.last().map_or(v, Vec::as_slice);
        self.output_layer().affine_into(last, &mut output_logits);
        Ok(ForwardTrace {
            pre_activations,
            post_activations,
            output_logits,
        })
    }

    /// Unmasked forward pass with each hidden layer's output multiplied by
    /// the matching entry of `scales`. Returns the output logits.
    pub fn forward_scaled(&self, v: &[f64], scales: &[f64]) -> Result<Vec<f64>> {
        self.check_input(v)?;
        if scales.len() != self.n_hidden_layers() {
            return Err(shape(format!(
                "{} scales for {} hidden layers",
                scales.len(),
                self.n_hidden_layers()
            )));
        }
        let mut h = v.to_vec();
        let mut z = Vec::new();
        for (layer, &scale) in self.layers.iter().zip(scales) {
            layer.affine_into(&h, &mut z);
            h.clear();
            h.extend(z.iter().map(|&z| scale * self.activation.apply(z)));
        }
        let mut logits = Vec::new();
        self.output_layer().affine_into(&h, &mut logits);
        Ok(logits)
    }

    /// Gradient of `output_grad . logits` with respect to every parameter.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        v: &[f64],
        output_grad: &[f64],
        mask: Option<&DropoutMask>,
    ) -> Result<ParamGrads> {
        let mut grads = ParamGrads::zeros_like(self);
        self.backward_into(trace, v, output_grad, mask, 1.0, &mut grads)?;
        Ok(grads)
    }

    /// Adds `weight * d(output_grad . logits)/d(theta)` into `grads`.
    pub fn backward_into(
        &self,
        trace: &ForwardTrace,
        v: &[f64],
        output_grad: &[f64],
        mask: Option<&DropoutMask>,
        weight: f64,
        grads: &mut ParamGrads,
    ) -> Result<()> {
        self.check_input(v)?;
        let n_hidden = self.n_hidden_layers();
        if output_grad.len() != self.arch.output_dim {
            return Err(shape(format!(
                "output gradient has length {}, model has {} outputs",
                output_grad.len(),
                self.arch.output_dim
            )));
        }
        if trace.pre_activations.len() != n_hidden
            || trace.post_activations.len() != n_hidden
            || trace
                .pre_activations
                .iter()
                .zip(&self.arch.hidden_sizes)
                .any(|(z, &h)| z.len() != h)
        {
            return Err(shape("trace does not match the model"));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(shape("gradient buffer does not match the model"));
        }
        if let Some(mask) = mask {
            self.check_mask(mask)?;
            let consistent = trace
                .post_activations
                .iter()
                .enumerate()
                .all(|(l, h)| h.iter().zip(mask.layer(l)).all(|(&h, &keep)| keep || h == 0.0));
            if !consistent {
                return Err(shape("trace was not produced under this mask"));
            }
        }

        let mut delta: Vec<f64> = output_grad.iter().map(|g| g * weight).collect();
        for l in (0..=n_hidden).rev() {
            let layer = &self.layers[l];
            let input = if l == 0 { v } else { &trace.post_activations[l - 1] };
            let g = &mut grads.layers[l];
            for (i, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.biases[i] += d;
                let row = &mut g.weights[i * layer.fan_in..(i + 1) * layer.fan_in];
                for (gw, &x) in row.iter_mut().zip(input) {
                    *gw += d * x;
                }
            }
            if l == 0 {
                break;
            }
            // Back through the mask and nonlinearity of hidden layer l - 1.
            let z = &trace.pre_activations[l - 1];
            let mut next = vec![0.0; layer.fan_in];
            for (i, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (n, &w) in next.iter_mut().zip(layer.row(i)) {
                    *n += d * w;
                }
            }
            for (j, n) in next.iter_mut().enumerate() {
                let keep = mask.map_or(true, |m| m.layer(l - 1)[j]);
                *n = if keep { *n * self.activation.derivative(z[j]) } else { 0.0 };
            }
            delta = next;
        }
        Ok(())
    }

    /// Rescales every incoming-weight row whose norm exceeds its cap.
    pub fn project_norms(&mut self, constraints: &NormConstraintSet) -> Result<()> {
        self.project_norms_impl(constraints, None)
    }

    /// Like [`project_norms`](Self::project_norms) but only over the
    /// sub-network of `mask`: masked-off rows are skipped and masked-off
    /// inputs neither count towards a row's norm nor get rescaled.
    pub fn project_norms_active(
        &mut self,
        constraints: &NormConstraintSet,
        mask: &DropoutMask,
    ) -> Result<()> {
        self.check_mask(mask)?;
        self.project_norms_impl(constraints, Some(mask))
    }

    fn project_norms_impl(
        &mut self,
        constraints: &NormConstraintSet,
        mask: Option<&DropoutMask>,
    ) -> Result<()> {
        if constraints.caps.len() != self.layers.len() {
            return Err(shape(format!(
                "{} norm caps for {} layers",
                constraints.caps.len(),
                self.layers.len()
            )));
        }
        let n_hidden = self.n_hidden_layers();
        for (l, (layer, cap)) in self.layers.iter_mut().zip(&constraints.caps).enumerate() {
            let Some(cap) = *cap else { continue };
            if cap.is_infinite() {
                continue;
            }
            let row_mask = mask.filter(|_| l < n_hidden).map(|m| m.layer(l));
            let col_mask = mask.filter(|_| l > 0).map(|m| m.layer(l - 1));
            let fan_in = layer.fan_in;
            for i in 0..layer.fan_out {
                if row_mask.is_some_and(|m| !m[i]) {
                    continue;
                }
                let row = &mut layer.weights[i * fan_in..(i + 1) * fan_in];
                let active = |j: usize| col_mask.map_or(true, |m| m[j]);
                let norm = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| active(j))
                    .map(|(_, w)| w * w)
                    .sum::<f64>()
                    .sqrt();
                if norm > cap * (1.0 + NORM_SLACK) {
                    let scale = cap / norm;
                    for (j, w) in row.iter_mut().enumerate() {
                        if active(j) {
                            *w *= scale;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Serialises into the versioned little-endian model format.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.activation != Activation::Rectifier {
            return Err(invalid("only rectifier networks can be saved"));
        }
        let n_values: usize = self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum();
        let mut out = Vec::with_capacity(9 + 8 * self.layers.len() + 8 * n_values);
        out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        out.push(self.output_kind.code());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            out.extend_from_slice(&(layer.fan_in as u32).to_le_bytes());
            out.extend_from_slice(&(layer.fan_out as u32).to_le_bytes());
        }
        for layer in &self.layers {
            for x in layer.weights.iter().chain(&layer.biases) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = ByteReader { bytes, pos: 0 };
        let version = reader.u32()?;
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        let kind_code = reader.u8()?;
        let output_kind = OutputKind::from_code(kind_code)
            .ok_or_else(|| model_format(format!("unknown output kind {kind_code}")))?;
        let n_layers = reader.u32()? as usize;
        if n_layers < 2 {
            return Err(model_format(format!("{n_layers} layers; need at least 2")));
        }
        let mut dims = Vec::with_capacity(n_layers.min(1024));
        for _ in 0..n_layers {
            dims.push((reader.u32()? as usize, reader.u32()? as usize));
        }
        for (l, pair) in dims.windows(2).enumerate() {
            if pair[0].1 != pair[1].0 {
                return Err(model_format(format!(
                    "layer {l} has fan_out {} but layer {} has fan_in {}",
                    pair[0].1,
                    l + 1,
                    pair[1].0
                )));
            }
        }
        let arch = Architecture::new(
            dims[0].0,
            dims[..n_layers - 1].iter().map(|d| d.1).collect(),
            dims[n_layers - 1].1,
            output_kind,
        )
        .map_err(|e| model_format(e.to_string()))?;
        let mut layers = Vec::with_capacity(n_layers);
        for &(fan_in, fan_out) in &dims {
            let weights = reader.f64s(fan_in * fan_out)?;
            let biases = reader.f64s(fan_out)?;
            layers.push(LayerParams {
                fan_in,
                fan_out,
                weights,
                biases,
            });
        }
        if reader.pos != bytes.len() {
            return Err(model_format(format!(
                "{} trailing bytes",
                bytes.len() - reader.pos
            )));
        }
        let params = Self {
            layers,
            output_kind,
            arch,
            activation: Activation::Rectifier,
        };
        params.validate()?;
        Ok(params)
    }
}

fn model_format(reason: String) -> Error {
    Error::Format {
        what: "model file",
        reason,
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl ByteReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| model_format(format!("truncated at byte {}", self.bytes.len())))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| model_format("declared dimensions overflow".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn save_model(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, params.to_bytes()?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelParams> {
    ModelParams::from_bytes(&fs::read(path)?)
}

/// Squashes logits into a predictive distribution. Sigmoid outputs are
/// returned as the two-class vector `[1 - p, p]`.
pub fn output_distribution(logits: &[f64], kind: OutputKind) -> Result<Vec<f64>> {
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("output logit".into()));
    }
    Ok(squash(logits, kind))
}

/// [`output_distribution`] without the finiteness check.
pub(crate) fn squash(logits: &[f64], kind: OutputKind) -> Vec<f64> {
    match kind {
        OutputKind::Sigmoid => {
            // Computing both tails directly keeps the small one accurate.
            vec![sigmoid(-logits[0]), sigmoid(logits[0])]
        }
        OutputKind::Softmax => {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / total).collect()
        }
    }
}

/// Log-probabilities of each class, computed without forming the
/// probabilities first.
pub fn log_distribution(logits: &[f64], kind: OutputKind) -> Vec<f64> {
    match kind {
        OutputKind::Sigmoid => {
            let z = logits[0];
            vec![-softplus(z), -softplus(-z)]
        }
        OutputKind::Softmax => {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            logits.iter().map(|z| z - lse).collect()
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Maps a gradient with respect to the class-probability vector's logits
/// (one entry per class) onto the model's output units. For sigmoid outputs
/// only the class-1 component drives the single logit.
pub fn class_grad_to_output(grad: &[f64], kind: OutputKind) -> Vec<f64> {
    match kind {
        OutputKind::Sigmoid => vec![grad[1]],
        OutputKind::Softmax => grad.to_vec(),
    }
}
