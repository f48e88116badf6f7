//! Trainable spatial attention over a convolutional volume.
//!
//! Given a volume `D` of shape (B,H,W,N) the module computes
//!
//! ```text
//! hidden = relu(conv1x1(...relu(conv1x1(D))))     widths from AttentionConfig
//! A      = sigmoid(locally_connected_1x1(hidden)) (B,H,W,1), unshared weights
//! D~     = D * A                                  mask broadcast over channels
//! F      = GAP(D~) / max(mean_hw(A), 1e-8)        (B,N)
//! ```
//!
//! An attention branch adds a dense layer and softmax on top of `F`.

mod export;

pub use export::{export_mask, mask_stem, read_mask_csv, upsample_nearest, write_pgm, MaskExport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::init::{glorot_uniform, he_normal, param_rng};
use crate::kernels::Padding;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Floor applied to the per-item mask mean before normalizing.
pub const MASK_MEAN_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    /// Widths of the stacked relu 1x1 convolutions ahead of the mask layer.
    pub widths: Vec<usize>,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { widths: vec![32, 16] }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::ModelSpec("attention needs at least one 1x1 conv width".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::ModelSpec("attention conv widths must be positive".into()));
        }
        Ok(())
    }

    /// Scalar parameters of a module on an (h, w, n) volume.
    pub fn parameter_count(&self, h: usize, w: usize, n: usize) -> usize {
        let mut count = 0;
        let mut cin = n;
        for &width in &self.widths {
            count += cin * width + width;
            cin = width;
        }
        count + h * w * cin + h * w
    }
}

#[derive(Clone, Debug)]
pub struct AttentionModule {
    input_shape: [usize; 3],
    convs: Vec<(ParamId, ParamId)>,
    mask_weight: ParamId,
    mask_bias: ParamId,
    prefix: String,
}

/// Graph nodes produced by one attention forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AttentionNodes {
    /// A: (B,H,W,1), values in (0,1).
    pub mask: NodeId,
    /// D~: (B,H,W,N).
    pub masked: NodeId,
    /// F: (B,N).
    pub features: NodeId,
    /// Set when some batch item's mask mean fell below [`MASK_MEAN_FLOOR`].
    pub degenerate: bool,
}

/// Concrete values of an attention pass for one batch.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub mask: Tensor,
    pub masked: Tensor,
    pub features: Tensor,
    pub probabilities: Option<Tensor>,
    pub degenerate: bool,
}

impl AttentionOutput {
    pub fn from_graph(graph: &Graph, nodes: &AttentionNodes, probs: Option<NodeId>) -> Self {
        Self {
            mask: graph.value(nodes.mask).clone(),
            masked: graph.value(nodes.masked).clone(),
            features: graph.value(nodes.features).clone(),
            probabilities: probs.map(|p| graph.value(p).clone()),
            degenerate: nodes.degenerate,
        }
    }
}

impl AttentionModule {
    /// Registers the module's parameters under `prefix`. The mask layer starts
    /// at zero, so the initial mask is 0.5 everywhere and F equals GAP(D).
    pub fn build(store: &mut ParamStore, prefix: &str, input_shape: &[usize], config: &AttentionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let [h, w, n] = match *input_shape {
            [h, w, n] => [h, w, n],
            ref s => return Err(Error::ModelSpec(format!("attention input must be an (h, w, channels) volume, got {s:?}"))),
        };
        if n == 0 || h == 0 || w == 0 {
            return Err(Error::ModelSpec(format!("attention input {input_shape:?} has an empty axis")));
        }
        let mut convs = Vec::with_capacity(config.widths.len());
        let mut cin = n;
        for (i, &width) in config.widths.iter().enumerate() {
            let wname = format!("{prefix}.conv{i}.w");
            let weight = he_normal(&[1, 1, cin, width], cin, &mut param_rng(seed, &wname));
            let wid = store.add(wname, weight)?;
            let bid = store.add(format!("{prefix}.conv{i}.b"), Tensor::zeros(&[width]))?;
            convs.push((wid, bid));
            cin = width;
        }
        let mask_weight = store.add(format!("{prefix}.mask.w"), Tensor::zeros(&[h, w, cin]))?;
        let mask_bias = store.add(format!("{prefix}.mask.b"), Tensor::zeros(&[h, w]))?;
        Ok(Self {
            input_shape: [h, w, n],
            convs,
            mask_weight,
            mask_bias,
            prefix: prefix.to_string(),
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.convs.iter().flat_map(|&(w, b)| [w, b]).collect();
        ids.extend([self.mask_weight, self.mask_bias]);
        ids
    }

    pub fn forward(&self, store: &ParamStore, graph: &mut Graph, volume: NodeId) -> Result<AttentionNodes> {
        let shape = graph.value(volume).shape();
        if shape.len() != 4 || shape[1..] != self.input_shape {
            return Err(Error::shape(
                "attention",
                format!("module built for {:?} received {shape:?}", self.input_shape),
            ));
        }
        let mut hidden = volume;
        for &(w, b) in &self.convs {
            let wn = graph.param(store, w);
            let bn = graph.param(store, b);
            let c = graph.conv2d(hidden, wn, bn, 1, Padding::Same)?;
            hidden = graph.relu(c)?;
        }
        let wn = graph.param(store, self.mask_weight);
        let bn = graph.param(store, self.mask_bias);
        let logits = graph.locally_connected(hidden, wn, bn)?;
        let mask = graph.sigmoid(logits)?;
        let masked = graph.mul_broadcast(volume, mask)?;
        let pooled = graph.gap(masked)?;
        let mask_mean = graph.gap(mask)?;
        let degenerate = graph.value(mask_mean).data().iter().any(|&m| m < MASK_MEAN_FLOOR);
        if degenerate {
            log::warn!("{}: attention mask mean collapsed below {MASK_MEAN_FLOOR:e}", self.prefix);
        }
        let guarded = graph.clamp_min(mask_mean, MASK_MEAN_FLOOR)?;
        let features = graph.div_rows(pooled, guarded)?;
        Ok(AttentionNodes {
            mask,
            masked,
            features,
            degenerate,
        })
    }
}

/// Dense layer plus softmax mapping features to class probabilities.
#[derive(Clone, Debug)]
pub struct DenseHead {
    weight: ParamId,
    bias: ParamId,
    inputs: usize,
    classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum HeadInit {
    #[default]
    Glorot,
    Zero,
}

impl DenseHead {
    pub fn build(store: &mut ParamStore, prefix: &str, inputs: usize, classes: usize, init: HeadInit, seed: u64) -> Result<Self> {
        if inputs == 0 || classes < 2 {
            return Err(Error::ModelSpec(format!(
                "head needs at least one input and two classes, got {inputs} -> {classes}"
            )));
        }
        let wname = format!("{prefix}.w");
        let value = match init {
            HeadInit::Glorot => glorot_uniform(&[inputs, classes], inputs, classes, &mut param_rng(seed, &wname)),
            HeadInit::Zero => Tensor::zeros(&[inputs, classes]),
        };
        let weight = store.add(wname, value)?;
        let bias = store.add(format!("{prefix}.b"), Tensor::zeros(&[classes]))?;
        Ok(Self {
            weight,
            bias,
            inputs,
            classes,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    /// Returns `(logits, probabilities)`.
    pub fn forward(&self, store: &ParamStore, graph: &mut Graph, features: NodeId) -> Result<(NodeId, NodeId)> {
        let w = graph.param(store, self.weight);
        let b = graph.param(store, self.bias);
        let logits = graph.dense(features, w, b)?;
        let probs = graph.softmax(logits)?;
        Ok((logits, probs))
    }
}
