//! Models as ordered chains of components, plus analytic generators for a
//! ResNet-50-like and a ViT-B/16-like network.
//!
//! FLOP figures count multiply-accumulates, the convention used when quoting
//! "4.1 GFLOPs" for ResNet-50 at 224x224.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BYTES_F32: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ComponentKind {
    Conv,
    Attention,
    Mlp,
    Embedding,
    Norm,
    Head,
}

impl ComponentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ComponentKind::Conv => "Conv",
            ComponentKind::Attention => "Attention",
            ComponentKind::Mlp => "Mlp",
            ComponentKind::Embedding => "Embedding",
            ComponentKind::Norm => "Norm",
            ComponentKind::Head => "Head",
        }
    }
}

/// One logical unit of the model: a layer or a block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub id: usize,
    pub kind: ComponentKind,
    /// Forward FLOPs per sample.
    pub flops_fwd: f64,
    /// Backward FLOPs per sample.
    pub flops_bwd: f64,
    pub param_count: u64,
    /// Activation bytes kept per sample for the backward pass.
    pub activation_bytes_per_sample: u64,
}

impl Component {
    pub fn flops_total(&self) -> f64 {
        self.flops_fwd + self.flops_bwd
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub name: String,
    components: Vec<Component>,
}

impl ModelGraph {
    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Returns a copy with every component's compute cost scaled by the
    /// matching factor. Used for drift and scripted perturbations.
    pub fn with_flop_scale(&self, factors: &[f64]) -> ModelGraph {
        let mut out = self.clone();
        for (c, f) in out.components.iter_mut().zip(factors) {
            c.flops_fwd *= f;
            c.flops_bwd *= f;
        }
        out
    }
}

pub fn total_params(graph: &ModelGraph) -> u64 {
    graph.components.iter().map(|c| c.param_count).sum()
}

/// Dataset and batching for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSchedule {
    pub dataset_size: u64,
    pub global_batch: u64,
    pub epochs: u32,
    #[serde(default = "default_bytes_per_element")]
    pub bytes_per_element: u64,
}

fn default_bytes_per_element() -> u64 {
    BYTES_F32
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        TrainingSchedule {
            dataset_size: 50_000,
            global_batch: 512,
            epochs: 100,
            bytes_per_element: BYTES_F32,
        }
    }
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.dataset_size == 0 || self.global_batch == 0 || self.epochs == 0 {
            return Err(Error::validation(
                "schedule: dataset_size, global_batch and epochs must be positive",
            ));
        }
        if self.bytes_per_element == 0 {
            return Err(Error::validation("schedule: bytes_per_element must be positive"));
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.dataset_size.div_ceil(self.global_batch)
    }
}

/// Workload file entry. Signed and floating fields are accepted so that a
/// negative value is reported as a validation error instead of a parse error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub kind: ComponentKind,
    pub flops_fwd: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flops_bwd: Option<f64>,
    pub param_count: f64,
    pub activation_bytes_per_sample: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub name: String,
    pub components: Vec<ComponentSpec>,
}

impl From<&ModelGraph> for WorkloadSpec {
    fn from(g: &ModelGraph) -> Self {
        WorkloadSpec {
            name: g.name.clone(),
            components: g
                .components
                .iter()
                .map(|c| ComponentSpec {
                    kind: c.kind,
                    flops_fwd: c.flops_fwd,
                    flops_bwd: Some(c.flops_bwd),
                    param_count: c.param_count as f64,
                    activation_bytes_per_sample: c.activation_bytes_per_sample as f64,
                })
                .collect(),
        }
    }
}

fn non_negative_count(value: f64, field: &str, idx: usize) -> Result<u64> {
    if !value.is_finite() || value < 0.0 || value.fract() != 0.0 || value > u64::MAX as f64 {
        return Err(Error::validation(format!(
            "component {idx}: {field} must be a finite non-negative integer, got {value}"
        )));
    }
    Ok(value as u64)
}

fn non_negative_real(value: f64, field: &str, idx: usize) -> Result<f64> {
    if !value.is_finite() || value < 0.0 {
        return Err(Error::validation(format!(
            "component {idx}: {field} must be finite and non-negative, got {value}"
        )));
    }
    Ok(value)
}

/// Builds a validated chain from a parsed workload description. Backward
/// FLOPs default to twice the forward FLOPs.
pub fn build_chain(spec: &WorkloadSpec) -> Result<ModelGraph> {
    if spec.components.is_empty() {
        return Err(Error::validation(format!(
            "workload `{}` has no components",
            spec.name
        )));
    }
    let components = spec
        .components
        .iter()
        .enumerate()
        .map(|(id, c)| {
            let flops_fwd = non_negative_real(c.flops_fwd, "flops_fwd", id)?;
            let flops_bwd = match c.flops_bwd {
                Some(b) => non_negative_real(b, "flops_bwd", id)?,
                None => 2.0 * flops_fwd,
            };
            Ok(Component {
                id,
                kind: c.kind,
                flops_fwd,
                flops_bwd,
                param_count: non_negative_count(c.param_count, "param_count", id)?,
                activation_bytes_per_sample: non_negative_count(
                    c.activation_bytes_per_sample,
                    "activation_bytes_per_sample",
                    id,
                )?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelGraph {
        name: spec.name.clone(),
        components,
    })
}

fn conv_out(size: u64, kernel: u64, stride: u64, pad: u64) -> u64 {
    (size + 2 * pad - kernel) / stride + 1
}

/// Accumulates the parameters, MACs and stored outputs of a run of conv+BN
/// layers that make up one component.
#[derive(Default)]
struct ConvBlock {
    params: u64,
    macs: u64,
    outputs: u64,
}

impl ConvBlock {
    /// Conv without bias followed by batch norm. Batch-norm running
    /// statistics are counted with the parameters since they are part of the
    /// replicated model state.
    fn conv_bn(&mut self, k: u64, c_in: u64, c_out: u64, h_out: u64) {
        self.params += k * k * c_in * c_out + 4 * c_out;
        self.macs += k * k * c_in * c_out * h_out * h_out;
        self.outputs += c_out * h_out * h_out;
    }

    fn finish(self, id: usize, kind: ComponentKind) -> Component {
        let flops_fwd = self.macs as f64;
        Component {
            id,
            kind,
            flops_fwd,
            flops_bwd: 2.0 * flops_fwd,
            param_count: self.params,
            activation_bytes_per_sample: self.outputs * BYTES_F32,
        }
    }
}

/// ResNet-50-like chain: stem, 16 bottleneck blocks (3+4+6+3), head.
/// Residual branches are folded into their block.
pub fn resnet50_like(input_resolution: u64, num_classes: u64) -> Result<ModelGraph> {
    if input_resolution < 32 {
        return Err(Error::validation(format!(
            "resnet50_like: input resolution must be >= 32, got {input_resolution}"
        )));
    }
    if num_classes == 0 {
        return Err(Error::validation("resnet50_like: num_classes must be positive"));
    }
    let mut components = Vec::with_capacity(18);

    let mut stem = ConvBlock::default();
    let h = conv_out(input_resolution, 7, 2, 3);
    stem.conv_bn(7, 3, 64, h);
    let mut h = conv_out(h, 3, 2, 1); // max pool
    stem.outputs += 64 * h * h;
    components.push(stem.finish(0, ComponentKind::Conv));

    let mut c_in = 64;
    for (width, blocks, first_stride) in [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)] {
        for b in 0..blocks {
            let stride = if b == 0 { first_stride } else { 1 };
            let h_out = conv_out(h, 3, stride, 1);
            let c_out = 4 * width;
            let mut block = ConvBlock::default();
            block.conv_bn(1, c_in, width, h);
            block.conv_bn(3, width, width, h_out);
            block.conv_bn(1, width, c_out, h_out);
            if b == 0 {
                block.conv_bn(1, c_in, c_out, h_out);
            }
            components.push(block.finish(components.len(), ComponentKind::Conv));
            c_in = c_out;
            h = h_out;
        }
    }

    let fc_params = c_in * num_classes + num_classes;
    components.push(Component {
        id: components.len(),
        kind: ComponentKind::Head,
        flops_fwd: (c_in * h * h + c_in * num_classes) as f64,
        flops_bwd: 2.0 * (c_in * h * h + c_in * num_classes) as f64,
        param_count: fc_params,
        activation_bytes_per_sample: (c_in + num_classes) * BYTES_F32,
    });

    Ok(ModelGraph {
        name: format!("resnet50_like_{input_resolution}"),
        components,
    })
}

const VIT_PATCH: u64 = 16;
const VIT_HIDDEN: u64 = 768;
const VIT_LAYERS: usize = 12;
const VIT_MLP_RATIO: u64 = 4;

/// ViT-B/16-like chain: patch embedding, 12 x (attention, MLP), head.
///
/// Activation bytes count the tensors a memory-efficient attention kernel
/// keeps for backward: no s x s score matrix is materialised.
pub fn vit_b16_like(input_resolution: u64, num_classes: u64) -> Result<ModelGraph> {
    if input_resolution == 0 || !input_resolution.is_multiple_of(VIT_PATCH) {
        return Err(Error::validation(format!(
            "vit_b16_like: input resolution {input_resolution} is not a positive multiple of the patch size {VIT_PATCH}"
        )));
    }
    if num_classes == 0 {
        return Err(Error::validation("vit_b16_like: num_classes must be positive"));
    }
    let h = VIT_HIDDEN;
    let patches = (input_resolution / VIT_PATCH).pow(2);
    let s = patches + 1; // with class token
    let patch_dim = VIT_PATCH * VIT_PATCH * 3;
    let mut components = Vec::with_capacity(2 * VIT_LAYERS + 2);

    let push = |components: &mut Vec<Component>, kind, macs: u64, params: u64, act: u64| {
        components.push(Component {
            id: components.len(),
            kind,
            flops_fwd: macs as f64,
            flops_bwd: 2.0 * macs as f64,
            param_count: params,
            activation_bytes_per_sample: act * BYTES_F32,
        });
    };

    // patch projection + class token + position embedding
    push(
        &mut components,
        ComponentKind::Embedding,
        patches * patch_dim * h,
        patch_dim * h + h + h + s * h,
        patches * patch_dim + s * h,
    );
    let mlp = VIT_MLP_RATIO * h;
    for _ in 0..VIT_LAYERS {
        // pre-norm, qkv + output projections, scores and weighted sum
        push(
            &mut components,
            ComponentKind::Attention,
            4 * s * h * h + 2 * s * s * h,
            2 * h + 4 * h * h + 4 * h,
            5 * s * h,
        );
        // pre-norm, two linear layers, GELU
        push(
            &mut components,
            ComponentKind::Mlp,
            2 * s * h * mlp,
            2 * h + 2 * h * mlp + mlp + h,
            s * h + 2 * s * mlp,
        );
    }
    push(
        &mut components,
        ComponentKind::Head,
        h * num_classes,
        2 * h + h * num_classes + num_classes,
        h + num_classes,
    );

    Ok(ModelGraph {
        name: format!("vit_b16_like_{input_resolution}"),
        components,
    })
}
