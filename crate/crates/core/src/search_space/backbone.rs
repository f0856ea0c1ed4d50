use rand::Rng;

use super::{random_dag, AttentionDag, Result, SearchSpaceError};
use crate::model::ModelConfig;

/// Selectable depthwise-convolution kernel sizes.
pub const KERNEL_MENU: [usize; 7] = [3, 5, 7, 9, 15, 31, 65];
pub const MAX_KERNEL: usize = 65;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    Attention(AttentionDag),
    Conv(usize),
}

impl LayerSpec {
    pub fn is_attention(&self) -> bool {
        matches!(self, LayerSpec::Attention(_))
    }

    pub fn dag(&self) -> Option<&AttentionDag> {
        match self {
            LayerSpec::Attention(d) => Some(d),
            LayerSpec::Conv(_) => None,
        }
    }

    pub fn kernel(&self) -> Option<usize> {
        match self {
            LayerSpec::Conv(k) => Some(*k),
            LayerSpec::Attention(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BackboneSpec {
    pub layers: Vec<LayerSpec>,
}

impl BackboneSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(SearchSpaceError::EmptyBackbone);
        }
        Ok(Self { layers })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// A backbone without any attention layer is representable but unusual.
    pub fn is_conv_only(&self) -> bool {
        !self.layers.iter().any(LayerSpec::is_attention)
    }

    pub fn attention_layers(&self) -> impl Iterator<Item = (usize, &AttentionDag)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| l.dag().map(|d| (i, d)))
    }

    pub fn validate(&self, max_len: usize) -> Result<()> {
        if self.layers.is_empty() {
            return Err(SearchSpaceError::EmptyBackbone);
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let res = match layer {
                LayerSpec::Attention(dag) => dag.validate(max_len),
                LayerSpec::Conv(k) if KERNEL_MENU.contains(k) => Ok(()),
                LayerSpec::Conv(k) => Err(SearchSpaceError::InvalidKernel(*k)),
            };
            res.map_err(|e| SearchSpaceError::Layer {
                layer: i,
                source: Box::new(e),
            })?;
        }
        Ok(())
    }
}

/// `num_layers` standard attention layers.
pub fn standard_backbone(num_layers: usize) -> Result<BackboneSpec> {
    BackboneSpec::new(vec![LayerSpec::Attention(AttentionDag::standard()); num_layers])
}

/// Alternating conv/attention stack with descending kernels, the L2 formula
/// at the first attention layer and the L12 formula elsewhere.
pub fn autobert_zero_backbone(num_layers: usize) -> Result<BackboneSpec> {
    if num_layers == 0 || !num_layers.is_multiple_of(2) {
        return Err(SearchSpaceError::OddLayerCount(num_layers));
    }
    const DESCENDING: [usize; 6] = [65, 31, 15, 9, 5, 3];
    let convs = num_layers / 2;
    let kernel_at = |i: usize| -> usize {
        if convs == 1 {
            DESCENDING[0]
        } else if convs <= DESCENDING.len() {
            let pos = (i * (DESCENDING.len() - 1) + (convs - 1) / 2) / (convs - 1);
            DESCENDING[pos]
        } else {
            DESCENDING[i * DESCENDING.len() / convs]
        }
    };
    let layers = (0..num_layers)
        .map(|l| {
            if l % 2 == 0 {
                LayerSpec::Conv(kernel_at(l / 2))
            } else if l == 1 && l != num_layers - 1 {
                LayerSpec::Attention(AttentionDag::autobert_l2())
            } else {
                LayerSpec::Attention(AttentionDag::autobert_l12())
            }
        })
        .collect();
    BackboneSpec::new(layers)
}

/// Independent uniform layer choices; guarantees at least one attention layer.
pub fn random_backbone<R: Rng + ?Sized>(rng: &mut R, num_layers: usize, max_len: usize) -> Result<BackboneSpec> {
    if num_layers == 0 {
        return Err(SearchSpaceError::EmptyBackbone);
    }
    let mut layers = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        if rng.random_bool(0.5) {
            layers.push(LayerSpec::Attention(random_dag(rng, max_len)?));
        } else {
            layers.push(LayerSpec::Conv(KERNEL_MENU[rng.random_range(0..KERNEL_MENU.len())]));
        }
    }
    if !layers.iter().any(LayerSpec::is_attention) {
        let i = rng.random_range(0..num_layers);
        layers[i] = LayerSpec::Attention(random_dag(rng, max_len)?);
    }
    BackboneSpec::new(layers)
}

/// Trainable parameter count split by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamCount {
    /// Input-node projections and output projections of attention layers.
    pub attention: usize,
    /// GLU projections and kernels of convolution layers.
    pub conv: usize,
    /// Embeddings, layer norms and feed-forward blocks.
    pub other: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.attention + self.conv + self.other
    }
}

pub fn count_params(spec: &BackboneSpec, cfg: &ModelConfig) -> ParamCount {
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let h = cfg.heads;
    let ln = 2 * d;
    let ffn = 2 * d * cfg.ffn_ratio * d;
    let mut count = ParamCount {
        other: cfg.vocab * d + cfg.seq_len * d + ln,
        ..Default::default()
    };
    for layer in &spec.layers {
        match layer {
            LayerSpec::Attention(dag) => {
                count.attention += dag.inputs().len() * h * d * dh + d * d;
                count.other += ln + ffn + ln;
            }
            LayerSpec::Conv(k) => {
                count.conv += d * 2 * d + k * d;
                count.other += ln;
            }
        }
    }
    count
}
