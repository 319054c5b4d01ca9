use serde::{Deserialize, Serialize};

use super::{ActKind, LayerKind, LayerNode, ModelGraph};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// `Flatten → [Dense → BatchNorm → Act] × depth → Dense`.
    MlpPlain,
    /// As `MlpPlain`, hidden blocks after the first become `act(bn(Wx) + x)`.
    MlpResidual,
    /// VGG-style `[Conv3x3 → BatchNorm → Act (→ MaxPool every 2nd block)] × depth → Flatten → Dense`.
    ConvPlain,
    /// Patch embedding, alternating token- and channel-mixing dense blocks
    /// with residual adds, global average pooling and a dense head.
    MiniMixer,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::MlpPlain => "mlp-plain",
            Architecture::MlpResidual => "mlp-residual",
            Architecture::ConvPlain => "conv-plain",
            Architecture::MiniMixer => "mini-mixer",
        }
    }

    pub fn supports_skips(self) -> bool {
        matches!(self, Architecture::MlpResidual | Architecture::MiniMixer)
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mlp-plain" | "mlp" => Architecture::MlpPlain,
            "mlp-residual" => Architecture::MlpResidual,
            "conv-plain" | "conv" => Architecture::ConvPlain,
            "mini-mixer" | "mixer" => Architecture::MiniMixer,
            other => return Err(Error::Config(format!("unknown architecture `{other}`"))),
        })
    }
}

/// Everything needed to rebuild a model's structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub arch: Architecture,
    /// Per-sample input shape `[channels, height, width]`.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    /// Hidden blocks (MLPs, conv) or mixer layers.
    pub depth: usize,
    /// Hidden units, conv channels, or mixer channels.
    pub width: usize,
    /// Mixer patch side.
    #[serde(default = "default_patch")]
    pub patch: usize,
    pub binarize_weights: bool,
    pub binary_activations: bool,
    /// Ignored by architectures without residual blocks.
    #[serde(default = "default_true")]
    pub skip_connections: bool,
    /// Overrides the hidden activation chosen from the binarization flags.
    #[serde(default)]
    pub activation: Option<ActKind>,
}

fn default_patch() -> usize {
    4
}

fn default_true() -> bool {
    true
}

impl ArchSpec {
    pub fn new(arch: Architecture, input_shape: &[usize], num_classes: usize) -> Self {
        Self {
            arch,
            input_shape: input_shape.to_vec(),
            num_classes,
            depth: 3,
            width: 512,
            patch: default_patch(),
            binarize_weights: false,
            binary_activations: false,
            skip_connections: true,
            activation: None,
        }
    }

    pub fn with_size(mut self, depth: usize, width: usize) -> Self {
        self.depth = depth;
        self.width = width;
        self
    }

    pub fn with_binarization(mut self, weights: bool, activations: bool) -> Self {
        self.binarize_weights = weights;
        self.binary_activations = activations;
        self
    }

    pub fn with_skips(mut self, skips: bool) -> Self {
        self.skip_connections = skips;
        self
    }

    pub fn with_activation(mut self, act: ActKind) -> Self {
        self.activation = Some(act);
        self
    }

    pub fn with_patch(mut self, patch: usize) -> Self {
        self.patch = patch;
        self
    }

    /// Sign for binary activations, tanh for binary-weight models with float
    /// activations, relu for fully continuous models.
    pub fn hidden_activation(&self) -> ActKind {
        if let Some(a) = self.activation {
            a
        } else if self.binary_activations {
            ActKind::Sign
        } else if self.binarize_weights {
            ActKind::Tanh
        } else {
            ActKind::Relu
        }
    }

    fn uses_skips(&self) -> bool {
        self.skip_connections && self.arch.supports_skips()
    }
}

/// Builds and initializes a model. Weights are drawn uniformly from
/// `±sqrt(6 / (fan_in + fan_out))`; biases and shifts start at zero, scales at one.
pub fn build_model<T: Scalar>(spec: &ArchSpec, rng: &mut Rng) -> Result<ModelGraph<T>> {
    if spec.input_shape.len() != 3 || spec.input_shape.contains(&0) {
        return Err(Error::Config(format!(
            "input shape must be [c, h, w] with positive entries, got {:?}",
            spec.input_shape
        )));
    }
    if spec.num_classes < 2 || spec.width == 0 {
        return Err(Error::Config("need at least two classes and a positive width".into()));
    }
    let mut b = Builder::new(spec, rng);
    let [c, h, w] = [spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]];
    match spec.arch {
        Architecture::MlpPlain | Architecture::MlpResidual => {
            b.push(LayerKind::Flatten);
            let mut fan_in = c * h * w;
            for l in 0..spec.depth {
                let seg_input = b.nodes.len() - 1;
                b.dense(fan_in, spec.width)?;
                b.batchnorm(spec.width);
                if l > 0 && b.skips {
                    b.push(LayerKind::SkipAdd { source: seg_input });
                }
                b.activation();
                fan_in = spec.width;
            }
            b.dense(fan_in, spec.num_classes)?;
        }
        Architecture::ConvPlain => {
            if spec.depth == 0 {
                return Err(Error::Config("conv-plain needs at least one block".into()));
            }
            let (mut ch, mut hh, mut ww) = (c, h, w);
            for l in 0..spec.depth {
                b.conv(ch, spec.width, 3, 1, 1)?;
                b.batchnorm(spec.width);
                b.activation();
                ch = spec.width;
                if l % 2 == 1 && hh >= 2 && ww >= 2 {
                    b.push(LayerKind::MaxPool { size: 2 });
                    hh /= 2;
                    ww /= 2;
                }
            }
            b.push(LayerKind::Flatten);
            b.dense(ch * hh * ww, spec.num_classes)?;
        }
        Architecture::MiniMixer => {
            let p = spec.patch;
            if spec.depth == 0 || p == 0 || h % p != 0 || w % p != 0 || h / p != w / p {
                return Err(Error::Config(format!(
                    "mini-mixer needs depth >= 1 and a square patch grid; {h}x{w} with patch {p}"
                )));
            }
            let d = spec.width;
            let tokens = (h / p) * (w / p);
            b.conv(c, d, p, p, 0)?;
            b.batchnorm(d);
            b.activation();
            b.push(LayerKind::Reshape { to: vec![d, tokens] });
            for l in 0..spec.depth {
                // token mixing over [d, tokens]
                let seg_input = b.nodes.len() - 1;
                b.dense(tokens, tokens)?;
                b.batchnorm(tokens);
                if b.skips {
                    b.push(LayerKind::SkipAdd { source: seg_input });
                }
                b.activation();
                b.push(LayerKind::Transpose);
                // channel mixing over [tokens, d]
                let seg_input = b.nodes.len() - 1;
                b.dense(d, d)?;
                b.batchnorm(d);
                if b.skips {
                    b.push(LayerKind::SkipAdd { source: seg_input });
                }
                b.activation();
                if l + 1 < spec.depth {
                    b.push(LayerKind::Transpose);
                } else {
                    b.push(LayerKind::AvgPool);
                }
            }
            b.dense(d, spec.num_classes)?;
        }
    }
    b.finish()
}

struct Builder<'a, T> {
    spec: &'a ArchSpec,
    rng: &'a mut Rng,
    nodes: Vec<LayerNode<T>>,
    act: ActKind,
    skips: bool,
}

impl<'a, T: Scalar> Builder<'a, T> {
    fn new(spec: &'a ArchSpec, rng: &'a mut Rng) -> Self {
        Self {
            spec,
            rng,
            nodes: Vec::new(),
            act: spec.hidden_activation(),
            skips: spec.uses_skips(),
        }
    }

    fn push(&mut self, kind: LayerKind) -> &mut LayerNode<T> {
        let index = self.nodes.len();
        self.nodes.push(LayerNode::new(index, kind));
        self.nodes.last_mut().unwrap()
    }

    fn init_uniform(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<Tensor<T>> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.rng.uniform(shape, -bound, bound)
    }

    fn dense(&mut self, inputs: usize, outputs: usize) -> Result<()> {
        let w = self.init_uniform(&[outputs, inputs], inputs, outputs)?;
        let node = self.push(LayerKind::Dense { inputs, outputs });
        node.params = vec![w, Tensor::zeros(vec![outputs])];
        Ok(())
    }

    fn conv(&mut self, cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize) -> Result<()> {
        let w = self.init_uniform(
            &[cout, cin, kernel, kernel],
            cin * kernel * kernel,
            cout * kernel * kernel,
        )?;
        let node = self.push(LayerKind::Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            padding,
        });
        node.params = vec![w, Tensor::zeros(vec![cout])];
        Ok(())
    }

    fn batchnorm(&mut self, features: usize) {
        let node = self.push(LayerKind::BatchNorm { features });
        node.params = vec![Tensor::full(vec![features], T::one()), Tensor::zeros(vec![features])];
        node.stats = vec![Tensor::zeros(vec![features]), Tensor::full(vec![features], T::one())];
    }

    fn activation(&mut self) {
        let act = self.act;
        self.push(LayerKind::Activation(act));
    }

    fn finish(mut self) -> Result<ModelGraph<T>> {
        if self.spec.binarize_weights {
            let weight_nodes: Vec<usize> = self
                .nodes
                .iter()
                .filter(|n| n.kind.is_weight_layer())
                .map(|n| n.index)
                .collect();
            if weight_nodes.len() > 2 {
                for &i in &weight_nodes[1..weight_nodes.len() - 1] {
                    self.nodes[i].binarize_weights = true;
                }
            }
        }
        ModelGraph::from_nodes(
            self.spec.clone(),
            self.nodes,
            self.spec.input_shape.clone(),
            self.spec.num_classes,
        )
    }
}
