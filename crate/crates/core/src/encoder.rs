//! Pre-norm transformer layers with a swappable token-interaction block,
//! stacked over a single spatial resolution, plus a per-token linear
//! segmentation head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{mha_forward, MhaWeights};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::greab::{greab_interaction, GreabWeights};
use crate::params::join;
use crate::patching::{embed_and_position, partition, unpatch, PatchEmbedWeights, TokenGrid};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InteractionKind {
    Greab,
    Mha,
}

impl std::str::FromStr for InteractionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greab" => Ok(Self::Greab),
            "mha" => Ok(Self::Mha),
            other => Err(Error::Config(format!("unknown interaction kind {other:?}"))),
        }
    }
}

/// Architecture knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Patch side `L` in pixels.
    pub patch: usize,
    /// Token channels `C'`.
    pub channels: usize,
    /// Graph node count `M`.
    pub nodes: usize,
    pub graph_depth: usize,
    pub heads: usize,
    /// Encoder depth `D`.
    pub layers: usize,
    pub interaction: InteractionKind,
    pub mlp_ratio: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            channels: 32,
            nodes: 16,
            graph_depth: 1,
            heads: 1,
            layers: 4,
            interaction: InteractionKind::Greab,
            mlp_ratio: 4,
            classes: 3,
            height: 32,
            width: 32,
            in_channels: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch", self.patch),
            ("channels", self.channels),
            ("nodes", self.nodes),
            ("graph_depth", self.graph_depth),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("classes", self.classes),
            ("height", self.height),
            ("width", self.width),
            ("in_channels", self.in_channels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible into {}x{} patches",
                self.height, self.width, self.patch, self.patch
            )));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} channels cannot be split across {} heads",
                self.channels, self.heads
            )));
        }
        Ok(())
    }

    /// `N = HW / L²`.
    pub fn patches(&self) -> usize {
        self.height * self.width / (self.patch * self.patch)
    }

    pub fn positions(&self) -> usize {
        self.patch * self.patch
    }

    /// `T = N·L²`.
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormWeights<P = Tensor> {
    pub gamma: P,
    pub beta: P,
}

impl LayerNormWeights<Tensor> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
        }
    }
}

impl<P> LayerNormWeights<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> LayerNormWeights<Q> {
        LayerNormWeights {
            gamma: f(&join(prefix, "gamma"), &self.gamma),
            beta: f(&join(prefix, "beta"), &self.beta),
        }
    }
}

/// `C' -> r·C' -> C'` with GELU in between, no biases.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpWeights<P = Tensor> {
    pub expand: P,
    pub contract: P,
}

impl<P> MlpWeights<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> MlpWeights<Q> {
        MlpWeights {
            expand: f(&join(prefix, "expand"), &self.expand),
            contract: f(&join(prefix, "contract"), &self.contract),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Interaction<P = Tensor> {
    /// One block per head.
    Greab(Vec<GreabWeights<P>>),
    Mha(MhaWeights<P>),
}

impl<P> Interaction<P> {
    pub fn kind(&self) -> InteractionKind {
        match self {
            Interaction::Greab(_) => InteractionKind::Greab,
            Interaction::Mha(_) => InteractionKind::Mha,
        }
    }

    pub fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Interaction<Q> {
        match self {
            Interaction::Greab(heads) => Interaction::Greab(
                heads
                    .iter()
                    .enumerate()
                    .map(|(i, h)| h.map(&join(prefix, &format!("greab.head{i}")), f))
                    .collect(),
            ),
            Interaction::Mha(w) => Interaction::Mha(w.map(&join(prefix, "mha"), f)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GreatLayerWeights<P = Tensor> {
    pub norm1: LayerNormWeights<P>,
    pub interaction: Interaction<P>,
    pub norm2: LayerNormWeights<P>,
    pub mlp: MlpWeights<P>,
}

impl<P> GreatLayerWeights<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> GreatLayerWeights<Q> {
        GreatLayerWeights {
            norm1: self.norm1.map(&join(prefix, "norm1"), f),
            interaction: self.interaction.map(prefix, f),
            norm2: self.norm2.map(&join(prefix, "norm2"), f),
            mlp: self.mlp.map(&join(prefix, "mlp"), f),
        }
    }
}

/// Patch embedding, encoder layers and segmentation head.
#[derive(Clone, Debug, PartialEq)]
pub struct GreatModel<P = Tensor> {
    pub embed: PatchEmbedWeights<P>,
    pub layers: Vec<GreatLayerWeights<P>>,
    /// `[C', C_cls]`
    pub head: P,
}

impl<P> GreatModel<P> {
    /// Visits every leaf in a fixed order under its dotted name.
    pub fn map<Q>(&self, f: &mut dyn FnMut(&str, &P) -> Q) -> GreatModel<Q> {
        GreatModel {
            embed: self.embed.map("embed", f),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&format!("layer{i}"), f))
                .collect(),
            head: f("head", &self.head),
        }
    }

    /// Leaf names in traversal order.
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.map(&mut |name, _| out.push(name.to_string()));
        out
    }
}

impl GreatModel<Tensor> {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.channels;
        let embed = PatchEmbedWeights::init(config.in_channels, c, config.patches(), config.positions(), &mut rng);
        let hidden = config.mlp_ratio * c;
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let interaction = match config.interaction {
                InteractionKind::Greab => Interaction::Greab(
                    (0..config.heads)
                        .map(|_| {
                            GreabWeights::init(
                                config.nodes,
                                config.patches(),
                                config.positions(),
                                config.head_dim(),
                                config.graph_depth,
                                &mut rng,
                            )
                        })
                        .collect::<Result<_>>()?,
                ),
                InteractionKind::Mha => Interaction::Mha(MhaWeights::init(c, config.heads, &mut rng)?),
            };
            let mlp = MlpWeights {
                expand: Tensor::uniform(&[c, hidden], 1.0 / (c as f64).sqrt(), &mut rng),
                contract: Tensor::uniform(&[hidden, c], 1.0 / (hidden as f64).sqrt(), &mut rng),
            };
            layers.push(GreatLayerWeights {
                norm1: LayerNormWeights::new(c),
                interaction,
                norm2: LayerNormWeights::new(c),
                mlp,
            });
        }
        let head = Tensor::uniform(&[c, config.classes], 1.0 / (c as f64).sqrt(), &mut rng);
        Ok(Self { embed, layers, head })
    }

    /// Registers every weight on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> GreatModel<Var> {
        self.map(&mut |_, t| tape.param(t.clone()))
    }

    /// Registers every weight on `tape` as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> GreatModel<Var> {
        self.map(&mut |_, t| tape.constant(t.clone()))
    }

    /// Number of trainable scalars actually held by the model.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.map(&mut |_, t| n += t.numel());
        n
    }
}

fn layer_norm(tape: &mut Tape, x: &TokenGrid, w: &LayerNormWeights<Var>) -> Result<TokenGrid> {
    let y = tape.layer_norm(x.tokens, w.gamma, w.beta, LAYER_NORM_EPS)?;
    Ok(x.with_tokens(y))
}

fn mlp(tape: &mut Tape, x: &TokenGrid, w: &MlpWeights<Var>) -> Result<TokenGrid> {
    let rows = x.as_rows(tape)?;
    let h = tape.matmul(rows, w.expand)?;
    let h = tape.gelu(h)?;
    let out = tape.matmul(h, w.contract)?;
    x.from_rows(tape, out)
}

/// `y = interaction(norm1(x)) + x`, `z = mlp(norm2(y)) + y`.
pub fn great_layer_forward(tape: &mut Tape, x: &TokenGrid, w: &GreatLayerWeights<Var>) -> Result<TokenGrid> {
    let n1 = layer_norm(tape, x, &w.norm1)?;
    let interacted = match &w.interaction {
        // residual-free: the layer residual below comes from x
        Interaction::Greab(heads) => greab_interaction(tape, &n1, heads)?,
        Interaction::Mha(mha) => mha_forward(tape, &n1, mha)?.tokens,
    };
    let y = tape.add(interacted, x.tokens)?;
    let y = x.with_tokens(y);
    let n2 = layer_norm(tape, &y, &w.norm2)?;
    let m = mlp(tape, &n2, &w.mlp)?;
    let z = tape.add(m.tokens, y.tokens)?;
    Ok(y.with_tokens(z))
}

/// Partition, embed, then every encoder layer in order.
pub fn encoder_forward(
    tape: &mut Tape,
    image: &Tensor,
    layers: &[GreatLayerWeights<Var>],
    embed: &PatchEmbedWeights<Var>,
    patch: usize,
) -> Result<TokenGrid> {
    let patches = partition(image, patch)?;
    let mut x = embed_and_position(tape, &patches, embed)?;
    for layer in layers {
        x = great_layer_forward(tape, &x, layer)?;
    }
    Ok(x)
}

#[derive(Clone, Debug)]
pub struct SegOutput {
    /// `[T, C_cls]` logits in token order (patch-major), on the tape.
    pub token_logits: Var,
    /// `[H, W, C_cls]`
    pub logits: Tensor,
    /// `[H, W]` class ids.
    pub mask: Tensor,
}

/// Per-token linear map to class logits, laid back out as an image.
pub fn seg_head(tape: &mut Tape, tokens: &TokenGrid, head: Var) -> Result<SegOutput> {
    let hs = tape.shape(head).to_vec();
    if hs.len() != 2 || hs[0] != tokens.channels {
        return Err(Error::Extent {
            what: "head input channels",
            expected: tokens.channels,
            found: hs.first().copied().unwrap_or(0),
        });
    }
    let classes = hs[1];
    let rows = tokens.as_rows(tape)?;
    let token_logits = tape.matmul(rows, head)?;
    let laid = tape
        .value(token_logits)
        .reshape(&[tokens.patches(), tokens.positions(), classes])?;
    let logits = unpatch(&laid, tokens.height, tokens.width, tokens.patch)?;
    let mask = argmax_mask(&logits);
    Ok(SegOutput {
        token_logits,
        logits,
        mask,
    })
}

/// Per-pixel argmax over the last axis; ties go to the lowest class.
pub fn argmax_mask(logits: &Tensor) -> Tensor {
    let s = logits.shape();
    let k = s[s.len() - 1];
    let data = logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as f64
        })
        .collect();
    Tensor::from_parts(s[..s.len() - 1].to_vec(), data)
}

/// Ground-truth `[H, W]` mask reordered to match [`SegOutput::token_logits`].
pub fn targets_in_token_order(mask: &Tensor, patch: usize) -> Result<Vec<usize>> {
    if mask.ndim() != 2 {
        return Err(Error::InvalidTensor(format!(
            "mask must be HxW, got {:?}",
            mask.shape()
        )));
    }
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let rows = partition(&mask.reshape(&[h, w, 1])?, patch)?.to_rows();
    rows.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::InvalidTensor(format!("mask value {v} is not a class id")))
            }
        })
        .collect()
}

impl GreatModel<Var> {
    pub fn forward(&self, tape: &mut Tape, config: &ModelConfig, image: &Tensor) -> Result<SegOutput> {
        let tokens = encoder_forward(tape, image, &self.layers, &self.embed, config.patch)?;
        seg_head(tape, &tokens, self.head)
    }

    /// Mean per-pixel cross-entropy against an `[H, W]` mask.
    pub fn loss(
        &self,
        tape: &mut Tape,
        config: &ModelConfig,
        image: &Tensor,
        mask: &Tensor,
    ) -> Result<(Var, SegOutput)> {
        let out = self.forward(tape, config, image)?;
        let targets = targets_in_token_order(mask, config.patch)?;
        let loss = tape.cross_entropy(out.token_logits, &targets)?;
        Ok((loss, out))
    }
}
