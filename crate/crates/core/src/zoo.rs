//! Backbone builders and branch-combination strategies.
//!
//! A model is a backbone (plain layer stack) with attention branches tapped
//! off named pooling layers. Each branch owns an attention module and, unless
//! the model uses early fusion, its own softmax head. Early fusion instead
//! concatenates all branch feature vectors into one dense + softmax head.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionModule, AttentionNodes, DenseHead, HeadInit};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::init::{he_normal, param_rng};
use crate::kernels::Padding;
use crate::layers::{LayerKind, LayerSpec};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    AntonyClsf,
    AntonyExt,
    Resnet50,
    Vgg16,
}

impl Backbone {
    pub fn id(self) -> &'static str {
        match self {
            Backbone::AntonyClsf => "antony-clsf",
            Backbone::AntonyExt => "antony-ext",
            Backbone::Resnet50 => "resnet50",
            Backbone::Vgg16 => "vgg16",
        }
    }

    pub fn parse(id: &str) -> Result<Self> {
        Ok(match id {
            "antony-clsf" => Backbone::AntonyClsf,
            "antony-ext" => Backbone::AntonyExt,
            "resnet50" => Backbone::Resnet50,
            "vgg16" => Backbone::Vgg16,
            other => return Err(Error::ModelSpec(format!("unknown backbone `{other}`"))),
        })
    }

    /// Tap layer for the branch named `att{i}`.
    pub fn default_tap(self, branch_index: usize) -> Option<&'static str> {
        let taps: [&str; 3] = match self {
            Backbone::AntonyClsf | Backbone::AntonyExt => ["pool2", "pool3", "pool4"],
            Backbone::Vgg16 => ["pool3", "pool4", "pool5"],
            Backbone::Resnet50 => ["conv3_x", "conv4_x", "conv5_x"],
        };
        taps.get(branch_index).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    /// Every branch trains its own head with unit loss weight.
    None,
    EarlyFusion,
    MultiLoss,
}

impl Fusion {
    pub fn id(self) -> &'static str {
        match self {
            Fusion::None => "none",
            Fusion::EarlyFusion => "early-fusion",
            Fusion::MultiLoss => "multi-loss",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchSpec {
    pub name: String,
    pub tap: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub backbone: Backbone,
    /// Input (height, width).
    pub input: [usize; 2],
    pub in_channels: usize,
    pub width_multiplier: f64,
    pub branches: Vec<BranchSpec>,
    pub fusion: Fusion,
    pub loss_weights: Vec<f64>,
    pub classes: usize,
    pub attention: AttentionConfig,
    pub head_init: HeadInit,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            backbone: Backbone::Vgg16,
            input: [320, 224],
            in_channels: 1,
            width_multiplier: 1.0,
            branches: default_branches(Backbone::Vgg16, 2),
            fusion: Fusion::MultiLoss,
            loss_weights: vec![1.0, 0.8],
            classes: 5,
            attention: AttentionConfig::default(),
            head_init: HeadInit::Glorot,
            seed: 0,
        }
    }
}

/// `att0..att{n-1}` on the backbone's standard taps.
pub fn default_branches(backbone: Backbone, n: usize) -> Vec<BranchSpec> {
    (0..n.min(3))
        .map(|i| BranchSpec {
            name: format!("att{i}"),
            tap: backbone.default_tap(i).unwrap().to_string(),
        })
        .collect()
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input.contains(&0) || self.in_channels == 0 {
            return Err(Error::ModelSpec(format!(
                "input {:?} x {} channels has an empty axis",
                self.input, self.in_channels
            )));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::ModelSpec(format!("width multiplier {} must be positive", self.width_multiplier)));
        }
        if self.classes < 2 {
            return Err(Error::ModelSpec(format!("need at least two classes, got {}", self.classes)));
        }
        if self.branches.is_empty() {
            return Err(Error::ModelSpec(
                "no attention branches: the backbone alone has no classifier head".into(),
            ));
        }
        for (i, b) in self.branches.iter().enumerate() {
            if self.branches[..i].iter().any(|o| o.name == b.name) {
                return Err(Error::ModelSpec(format!("branch name `{}` used twice", b.name)));
            }
            if let Some(o) = self.branches[..i].iter().find(|o| o.tap == b.tap) {
                return Err(Error::ModelSpec(format!(
                    "branches `{}` and `{}` attach to the same tap `{}`",
                    o.name, b.name, b.tap
                )));
            }
        }
        match self.fusion {
            Fusion::MultiLoss => {
                if self.loss_weights.len() != self.branches.len() {
                    return Err(Error::ModelSpec(format!(
                        "multi-loss needs one weight per branch: {} branches, {} weights",
                        self.branches.len(),
                        self.loss_weights.len()
                    )));
                }
                if let Some(w) = self.loss_weights.iter().find(|w| !(**w > 0.0 && **w <= 1.0)) {
                    return Err(Error::ModelSpec(format!("loss weight {w} outside (0, 1]")));
                }
            }
            Fusion::EarlyFusion if self.branches.len() < 2 => {
                return Err(Error::ModelSpec("early fusion needs at least two branches".into()));
            }
            _ => {}
        }
        self.attention.validate()
    }

    /// Loss weight per branch for the configured fusion mode.
    pub fn branch_weights(&self) -> Vec<f64> {
        match self.fusion {
            Fusion::MultiLoss => self.loss_weights.clone(),
            _ => vec![1.0; self.branches.len()],
        }
    }

    fn scaled(&self, filters: usize) -> usize {
        ((filters as f64 * self.width_multiplier).round() as usize).max(1)
    }
}

/// Layer stack of a backbone, with filter counts scaled by `width_multiplier`.
pub fn backbone_layers(backbone: Backbone, width_multiplier: f64) -> Vec<LayerSpec> {
    let spec = ModelSpec {
        width_multiplier,
        ..ModelSpec::default()
    };
    let f = |n: usize| spec.scaled(n);
    let conv = |name: &str, n: usize, k: usize, s: usize| LayerSpec::conv(name, f(n), k, s);
    match backbone {
        Backbone::AntonyClsf => vec![
            conv("conv1", 32, 11, 2),
            LayerSpec::pool("pool1", 3, 2),
            conv("conv2", 64, 5, 1),
            LayerSpec::pool("pool2", 3, 2),
            conv("conv3", 96, 3, 1),
            LayerSpec::pool("pool3", 3, 2),
            conv("conv4", 128, 3, 1),
            LayerSpec::pool("pool4", 3, 2),
        ],
        Backbone::AntonyExt => vec![
            conv("conv1", 32, 11, 2),
            LayerSpec::pool("pool1", 3, 2),
            conv("conv2-1", 64, 3, 1),
            conv("conv2-2", 64, 3, 1),
            LayerSpec::pool("pool2", 3, 2),
            conv("conv3-1", 96, 3, 1),
            conv("conv3-2", 96, 3, 1),
            LayerSpec::pool("pool3", 3, 2),
            conv("conv4-1", 128, 3, 1),
            conv("conv4-2", 128, 3, 1),
            LayerSpec::pool("pool4", 3, 2),
        ],
        Backbone::Vgg16 => {
            let mut layers = Vec::new();
            for (block, (&width, &depth)) in [64, 128, 256, 512, 512].iter().zip(&[2, 2, 3, 3, 3]).enumerate() {
                for i in 1..=depth {
                    layers.push(conv(&format!("conv{}_{i}", block + 1), width, 3, 1));
                }
                layers.push(LayerSpec::pool(&format!("pool{}", block + 1), 2, 2));
            }
            layers
        }
        Backbone::Resnet50 => {
            let mut layers = vec![
                conv("conv1", 64, 7, 2),
                LayerSpec::new(
                    "maxpool",
                    LayerKind::MaxPool {
                        kernel: 3,
                        stride: 2,
                        padding: Padding::Same,
                    },
                ),
            ];
            for (stage, &(mid, out, blocks)) in [(64, 256, 3), (128, 512, 4), (256, 1024, 6), (512, 2048, 3)].iter().enumerate() {
                for i in 1..=blocks {
                    let stride = if stage > 0 && i == 1 { 2 } else { 1 };
                    layers.push(LayerSpec::new(
                        format!("conv{}_{i}", stage + 2),
                        LayerKind::Bottleneck {
                            mid: f(mid),
                            out: f(out),
                            stride,
                        },
                    ));
                }
            }
            layers
        }
    }
}

/// Per-item output shape of every backbone layer, in order.
pub fn infer_backbone_shapes(layers: &[LayerSpec], input: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut shapes = Vec::with_capacity(layers.len());
    let mut current = input.to_vec();
    for layer in layers {
        current = layer.output_shape(&current)?;
        shapes.push(current.clone());
    }
    Ok(shapes)
}

/// Resolves a tap name to a layer index. `convN_x` names the last block of
/// residual stage N.
pub fn resolve_tap(layers: &[LayerSpec], tap: &str) -> Option<usize> {
    if let Some(i) = layers.iter().position(|l| l.name == tap) {
        return Some(i);
    }
    let stage = tap.strip_suffix("_x")?;
    let prefix = format!("{stage}_");
    layers.iter().rposition(|l| l.name.starts_with(&prefix))
}

#[derive(Clone, Debug)]
struct ConvParams {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    padding: Padding,
}

#[derive(Clone, Debug)]
enum BuiltLayer {
    Conv { conv: ConvParams, relu: bool },
    Pool { kernel: usize, stride: usize, padding: Padding },
    Bottleneck { convs: [ConvParams; 3], projection: Option<ConvParams> },
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub name: String,
    pub tap: String,
    pub tap_index: usize,
    pub attention: AttentionModule,
    pub head: Option<DenseHead>,
}

impl Branch {
    /// Parameters owned by this branch alone.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.attention.param_ids();
        if let Some(h) = &self.head {
            ids.extend(h.param_ids());
        }
        ids
    }
}

#[derive(Clone, Debug)]
pub struct BuiltModel {
    spec: ModelSpec,
    layer_specs: Vec<LayerSpec>,
    layers: Vec<BuiltLayer>,
    shapes: Vec<Vec<usize>>,
    pub params: ParamStore,
    branches: Vec<Branch>,
    fused: Option<DenseHead>,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadNodes {
    pub logits: NodeId,
    pub probs: NodeId,
}

#[derive(Clone, Debug)]
pub struct BranchNodes {
    pub attention: AttentionNodes,
    pub head: Option<HeadNodes>,
}

#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub input: NodeId,
    pub branches: Vec<BranchNodes>,
    pub fused: Option<HeadNodes>,
}

#[derive(Clone, Debug)]
pub struct BatchPrediction {
    /// Per head, (B, classes).
    pub logits: Vec<Tensor>,
    pub probs: Vec<Tensor>,
    /// Per branch, (B, h, w, 1).
    pub masks: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    /// Cross-entropy per branch head; empty under early fusion.
    pub per_branch: Vec<NodeId>,
}

fn add_conv(
    store: &mut ParamStore,
    seed: u64,
    name: &str,
    k: usize,
    cin: usize,
    cout: usize,
    stride: usize,
    padding: Padding,
) -> Result<ConvParams> {
    let wname = format!("{name}.w");
    let w = he_normal(&[k, k, cin, cout], k * k * cin, &mut param_rng(seed, &wname));
    Ok(ConvParams {
        weight: store.add(wname, w)?,
        bias: store.add(format!("{name}.b"), Tensor::zeros(&[cout]))?,
        stride,
        padding,
    })
}

/// Builds the backbone alone, without branches or heads. Layers past the
/// deepest configured tap are never evaluated and are left out.
pub fn build_backbone(spec: &ModelSpec) -> Result<BuiltModel> {
    if spec.input.contains(&0) || spec.in_channels == 0 {
        return Err(Error::ModelSpec(format!("input {:?} has an empty axis", spec.input)));
    }
    let mut layer_specs = backbone_layers(spec.backbone, spec.width_multiplier);
    let deepest = spec.branches.iter().filter_map(|b| resolve_tap(&layer_specs, &b.tap)).max();
    if let Some(d) = deepest {
        layer_specs.truncate(d + 1);
    }
    let input = [spec.input[0], spec.input[1], spec.in_channels];
    let shapes = infer_backbone_shapes(&layer_specs, &input)?;
    let mut params = ParamStore::new();
    let mut layers = Vec::with_capacity(layer_specs.len());
    let mut cin = spec.in_channels;
    for (ls, shape) in layer_specs.iter().zip(&shapes) {
        let prefix = format!("backbone.{}", ls.name);
        let built = match ls.kind {
            LayerKind::Conv2d {
                filters,
                kernel,
                stride,
                padding,
                relu,
            } => BuiltLayer::Conv {
                conv: add_conv(&mut params, spec.seed, &prefix, kernel, cin, filters, stride, padding)?,
                relu,
            },
            LayerKind::MaxPool { kernel, stride, padding } => BuiltLayer::Pool { kernel, stride, padding },
            LayerKind::Bottleneck { mid, out, stride } => {
                let s = spec.seed;
                let convs = [
                    add_conv(&mut params, s, &format!("{prefix}.a"), 1, cin, mid, stride, Padding::Same)?,
                    add_conv(&mut params, s, &format!("{prefix}.b"), 3, mid, mid, 1, Padding::Same)?,
                    add_conv(&mut params, s, &format!("{prefix}.c"), 1, mid, out, 1, Padding::Same)?,
                ];
                let projection = if stride != 1 || cin != out {
                    Some(add_conv(&mut params, s, &format!("{prefix}.proj"), 1, cin, out, stride, Padding::Same)?)
                } else {
                    None
                };
                BuiltLayer::Bottleneck { convs, projection }
            }
            ref other => {
                return Err(Error::ModelSpec(format!("layer kind {other:?} cannot appear in a backbone")));
            }
        };
        cin = shape[2];
        layers.push(built);
    }
    Ok(BuiltModel {
        spec: spec.clone(),
        layer_specs,
        layers,
        shapes,
        params,
        branches: Vec::new(),
        fused: None,
    })
}

/// Adds one attention module per configured branch; heads are added unless
/// the model spec asks for early fusion.
pub fn attach_branches(model: &mut BuiltModel) -> Result<()> {
    let spec = model.spec.clone();
    if spec.branches.is_empty() {
        return Err(Error::ModelSpec(
            "no attention branches: the backbone alone has no classifier head".into(),
        ));
    }
    for b in &spec.branches {
        if model.branches.iter().any(|o| o.name == b.name || o.tap == b.tap) {
            return Err(Error::ModelSpec(format!("branch `{}` on `{}` is already attached", b.name, b.tap)));
        }
        let tap_index = resolve_tap(&model.layer_specs, &b.tap).ok_or_else(|| {
            Error::ModelSpec(format!(
                "tap `{}` for branch `{}` does not exist in {}",
                b.tap,
                b.name,
                spec.backbone.id()
            ))
        })?;
        if model.branches.iter().any(|o| o.tap_index == tap_index) {
            return Err(Error::ModelSpec(format!("tap `{}` already carries a branch", b.tap)));
        }
        let shape = model.shapes[tap_index].clone();
        let attention = AttentionModule::build(&mut model.params, &format!("{}.attn", b.name), &shape, &spec.attention, spec.seed)?;
        let head = if spec.fusion == Fusion::EarlyFusion {
            None
        } else {
            Some(DenseHead::build(
                &mut model.params,
                &format!("{}.head", b.name),
                shape[2],
                spec.classes,
                spec.head_init,
                spec.seed,
            )?)
        };
        model.branches.push(Branch {
            name: b.name.clone(),
            tap: b.tap.clone(),
            tap_index,
            attention,
            head,
        });
    }
    Ok(())
}

/// Adds the concat + dense + softmax head over all branch features.
pub fn build_early_fusion(model: &mut BuiltModel) -> Result<()> {
    if model.branches.len() < 2 {
        return Err(Error::ModelSpec(format!(
            "early fusion needs at least two branches, model has {}",
            model.branches.len()
        )));
    }
    if model.fused.is_some() {
        return Err(Error::ModelSpec("fusion head already built".into()));
    }
    let width = model.fused_width();
    model.fused = Some(DenseHead::build(
        &mut model.params,
        "fusion.head",
        width,
        model.spec.classes,
        model.spec.head_init,
        model.spec.seed,
    )?);
    Ok(())
}

/// Validates `spec` and builds the complete model it describes.
pub fn build_model(spec: &ModelSpec) -> Result<BuiltModel> {
    spec.validate()?;
    let mut model = build_backbone(spec)?;
    attach_branches(&mut model)?;
    if spec.fusion == Fusion::EarlyFusion {
        build_early_fusion(&mut model)?;
    }
    Ok(model)
}

/// Adds the weighted branch losses `sum_b w_b * L_b` to the graph.
pub fn multi_loss(graph: &mut Graph, branch_losses: &[NodeId], weights: &[f64]) -> Result<NodeId> {
    check_weights(branch_losses.len(), weights)?;
    graph.weighted_sum(branch_losses, weights)
}

/// Scalar form of [`multi_loss`].
pub fn multi_loss_value(branch_losses: &[f64], weights: &[f64]) -> Result<f64> {
    check_weights(branch_losses.len(), weights)?;
    Ok(branch_losses.iter().zip(weights).map(|(l, w)| l * w).sum())
}

fn check_weights(n: usize, weights: &[f64]) -> Result<()> {
    if n != weights.len() || n == 0 {
        return Err(Error::InvalidArgument(format!("{n} branch losses but {} weights", weights.len())));
    }
    // Zero is allowed here: it switches a branch off without rebuilding the model.
    if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(Error::InvalidArgument(format!("loss weight {w} outside [0, 1]")));
    }
    Ok(())
}

impl BuiltModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layer_specs(&self) -> &[LayerSpec] {
        &self.layer_specs
    }

    /// Per-item output shape of each backbone layer.
    pub fn layer_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn shape_of(&self, layer: &str) -> Option<&[usize]> {
        resolve_tap(&self.layer_specs, layer).map(|i| self.shapes[i].as_slice())
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn fused_head(&self) -> Option<&DenseHead> {
        self.fused.as_ref()
    }

    pub fn fused_width(&self) -> usize {
        self.branches.iter().map(|b| b.attention.input_shape()[2]).sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Spatial downsampling factor between the input and a branch's mask.
    pub fn mask_scale(&self, branch: usize) -> usize {
        let [h, _, _] = self.branches[branch].attention.input_shape();
        (self.spec.input[0] / h).max(1)
    }

    /// Builds the forward graph for a (B,H,W,C) batch.
    pub fn forward(&self, graph: &mut Graph, input: Tensor) -> Result<ForwardNodes> {
        let expected = [self.spec.input[0], self.spec.input[1], self.spec.in_channels];
        if input.rank() != 4 || input.shape()[1..] != expected {
            return Err(Error::shape(
                "model input",
                format!("expected (batch, {}, {}, {}), got {:?}", expected[0], expected[1], expected[2], input.shape()),
            ));
        }
        let x = graph.input(input);
        let deepest = self.branches.iter().map(|b| b.tap_index).max().unwrap_or(self.layers.len() - 1);
        let mut taps = vec![None; deepest + 1];
        let mut h = x;
        for (i, layer) in self.layers.iter().take(deepest + 1).enumerate() {
            h = self.layer_forward(graph, layer, h)?;
            taps[i] = Some(h);
        }
        let mut branches = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let volume = taps[b.tap_index].expect("tap computed");
            let attention = b.attention.forward(&self.params, graph, volume)?;
            let head = match &b.head {
                Some(head) => {
                    let (logits, probs) = head.forward(&self.params, graph, attention.features)?;
                    Some(HeadNodes { logits, probs })
                }
                None => None,
            };
            branches.push(BranchNodes { attention, head });
        }
        let fused = match &self.fused {
            Some(head) => {
                let feats: Vec<NodeId> = branches.iter().map(|b| b.attention.features).collect();
                let cat = graph.concat(&feats)?;
                let (logits, probs) = head.forward(&self.params, graph, cat)?;
                Some(HeadNodes { logits, probs })
            }
            None => None,
        };
        Ok(ForwardNodes {
            input: x,
            branches,
            fused,
        })
    }

    fn conv_forward(&self, graph: &mut Graph, c: &ConvParams, x: NodeId) -> Result<NodeId> {
        let w = graph.param(&self.params, c.weight);
        let b = graph.param(&self.params, c.bias);
        graph.conv2d(x, w, b, c.stride, c.padding)
    }

    fn layer_forward(&self, graph: &mut Graph, layer: &BuiltLayer, x: NodeId) -> Result<NodeId> {
        match layer {
            BuiltLayer::Conv { conv, relu } => {
                let y = self.conv_forward(graph, conv, x)?;
                if *relu {
                    graph.relu(y)
                } else {
                    Ok(y)
                }
            }
            BuiltLayer::Pool { kernel, stride, padding } => graph.maxpool(x, *kernel, *stride, *padding),
            BuiltLayer::Bottleneck { convs, projection } => {
                let a = self.conv_forward(graph, &convs[0], x)?;
                let a = graph.relu(a)?;
                let b = self.conv_forward(graph, &convs[1], a)?;
                let b = graph.relu(b)?;
                let c = self.conv_forward(graph, &convs[2], b)?;
                let shortcut = match projection {
                    Some(p) => self.conv_forward(graph, p, x)?,
                    None => x,
                };
                let sum = graph.add(c, shortcut)?;
                graph.relu(sum)
            }
        }
    }

    /// Training loss for one batch. Branch heads share the same one-hot
    /// targets; `weights` overrides the model spec's per-branch weights.
    pub fn loss(&self, graph: &mut Graph, out: &ForwardNodes, targets: &Tensor, weights: Option<&[f64]>) -> Result<LossNodes> {
        if let Some(fused) = out.fused {
            let total = graph.cross_entropy(fused.probs, targets)?;
            return Ok(LossNodes {
                total,
                per_branch: Vec::new(),
            });
        }
        let mut per_branch = Vec::with_capacity(out.branches.len());
        for b in &out.branches {
            let head = b
                .head
                .ok_or_else(|| Error::ModelSpec("branch without a head in a non-fusion model".into()))?;
            per_branch.push(graph.cross_entropy(head.probs, targets)?);
        }
        let default = self.spec.branch_weights();
        let weights = weights.unwrap_or(&default);
        let total = multi_loss(graph, &per_branch, weights)?;
        Ok(LossNodes { total, per_branch })
    }

    /// Names of the classifier heads: the fusion head alone under early
    /// fusion, otherwise one per branch.
    pub fn head_names(&self) -> Vec<String> {
        if self.fused.is_some() {
            vec!["fusion".to_string()]
        } else {
            self.branches.iter().map(|b| b.name.clone()).collect()
        }
    }

    /// Head outputs in [`head_names`](Self::head_names) order.
    pub fn head_nodes(&self, out: &ForwardNodes) -> Vec<HeadNodes> {
        match out.fused {
            Some(f) => vec![f],
            None => out.branches.iter().filter_map(|b| b.head).collect(),
        }
    }

    /// Runs one batch forward and returns concrete per-head logits and
    /// probabilities plus every branch's attention mask.
    pub fn predict_batch(&self, images: Tensor) -> Result<BatchPrediction> {
        let mut graph = Graph::new();
        let out = self.forward(&mut graph, images)?;
        let heads = self.head_nodes(&out);
        Ok(BatchPrediction {
            logits: heads.iter().map(|h| graph.value(h.logits).clone()).collect(),
            probs: heads.iter().map(|h| graph.value(h.probs).clone()).collect(),
            masks: out.branches.iter().map(|b| graph.value(b.attention.mask).clone()).collect(),
        })
    }

    /// One-line-per-layer summary with shapes and parameter counts.
    pub fn summary(&self) -> String {
        let mut out = format!(
            "{} input {}x{}x{} width x{}\n",
            self.spec.backbone.id(),
            self.spec.input[0],
            self.spec.input[1],
            self.spec.in_channels,
            self.spec.width_multiplier
        );
        for (ls, shape) in self.layer_specs.iter().zip(&self.shapes) {
            let tag = self
                .branches
                .iter()
                .find(|b| b.tap == ls.name || resolve_tap(&self.layer_specs, &b.tap) == resolve_tap(&self.layer_specs, &ls.name))
                .map(|b| format!(" ({})", b.name))
                .unwrap_or_default();
            out.push_str(&format!("  {:<10}{tag:<8} {:?}\n", ls.name, shape));
        }
        out.push_str(&format!("fusion: {}\n", self.spec.fusion.id()));
        out.push_str(&format!("parameters: {}\n", self.parameter_count()));
        out
    }
}
