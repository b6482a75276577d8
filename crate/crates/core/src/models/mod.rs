//! The four learnable networks and their shared state.
//!
//! * image encoder: patch embedding, pre-norm blocks with 2-D RoPE, mean pooling
//! * text encoder: byte-level transformer into the image embedding space
//! * projector: two affine layers mapping patch features into the decoder width
//! * decoder: causal toy language model reading a visual prefix

mod config;
pub mod nets;
pub mod params;
pub mod tokenizer;

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use config::{block_param_count, Activation, DecoderConfig, EncoderConfig, ModelConfig, PosEmbed, TextConfig};
pub use params::{DecoderParams, ParamTree, ProjectorParams, TextParams, VitParams};
pub use tokenizer::TextTokens;

use crate::error::Result;
use crate::patching::{MaskSet, TokenSequence};
use crate::real::Real;
use crate::rng;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Vit,
    TextEncoder,
    Projector,
    #[serde(rename = "llm")]
    Decoder,
}

impl Component {
    pub const ALL: [Component; 4] = [
        Component::Vit,
        Component::TextEncoder,
        Component::Projector,
        Component::Decoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Vit => "vit",
            Component::TextEncoder => "text_encoder",
            Component::Projector => "projector",
            Component::Decoder => "llm",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

/// Set of components, serialized as a list of names.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Vec<Component>", into = "Vec<Component>")]
pub struct ComponentSet(u8);

impl ComponentSet {
    pub const EMPTY: ComponentSet = ComponentSet(0);

    pub fn of(items: &[Component]) -> Self {
        items.iter().copied().collect()
    }

    pub fn all() -> Self {
        Self::of(&Component::ALL)
    }

    pub fn contains(self, c: Component) -> bool {
        self.0 & c.bit() != 0
    }

    pub fn insert(&mut self, c: Component) {
        self.0 |= c.bit();
    }

    pub fn remove(&mut self, c: Component) {
        self.0 &= !c.bit();
    }

    pub fn iter(self) -> impl Iterator<Item = Component> {
        Component::ALL.into_iter().filter(move |c| self.contains(*c))
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl FromIterator<Component> for ComponentSet {
    fn from_iter<I: IntoIterator<Item = Component>>(iter: I) -> Self {
        let mut s = ComponentSet::EMPTY;
        for c in iter {
            s.insert(c);
        }
        s
    }
}

impl From<Vec<Component>> for ComponentSet {
    fn from(v: Vec<Component>) -> Self {
        v.into_iter().collect()
    }
}

impl From<ComponentSet> for Vec<Component> {
    fn from(s: ComponentSet) -> Self {
        s.iter().collect()
    }
}

impl fmt::Debug for ComponentSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter().map(Component::name)).finish()
    }
}

/// All learnable parameters plus per-component freeze flags.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<S> {
    pub config: ModelConfig,
    pub vit: VitParams<Tensor<S>>,
    pub text: TextParams<Tensor<S>>,
    pub projector: ProjectorParams<Tensor<S>>,
    pub decoder: DecoderParams<Tensor<S>>,
    pub trainable: ComponentSet,
}

impl<S: Real> ModelState<S> {
    /// Randomly initialized state; each component draws from its own stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vit = VitParams::init(&config.encoder, &mut rng::stream(seed, "init/vit"));
        let text = TextParams::init(&config.text, config.embed_dim(), &mut rng::stream(seed, "init/text"));
        let projector =
            ProjectorParams::init(config.encoder.hidden, &config.decoder, &mut rng::stream(seed, "init/projector"));
        let decoder = DecoderParams::init(&config.decoder, &mut rng::stream(seed, "init/decoder"));
        Ok(Self {
            config,
            vit,
            text,
            projector,
            decoder,
            trainable: ComponentSet::all(),
        })
    }

    /// Frozen stand-in for the pretrained MIM teacher: the same encoder
    /// architecture with independently drawn weights.
    pub fn teacher(config: &EncoderConfig, seed: u64) -> VitParams<Tensor<S>> {
        VitParams::init(config, &mut rng::stream(seed, "init/teacher"))
    }

    pub fn cast<T: Real>(&self) -> ModelState<T> {
        ModelState {
            config: self.config.clone(),
            vit: self.vit.map_ref("", &mut |_, t| t.cast()),
            text: self.text.map_ref("", &mut |_, t| t.cast()),
            projector: self.projector.map_ref("", &mut |_, t| t.cast()),
            decoder: self.decoder.map_ref("", &mut |_, t| t.cast()),
            trainable: self.trainable,
        }
    }

    pub fn visit(&self, component: Component, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        match component {
            Component::Vit => self.vit.visit("", f),
            Component::TextEncoder => self.text.visit("", f),
            Component::Projector => self.projector.visit("", f),
            Component::Decoder => self.decoder.visit("", f),
        }
    }

    pub fn visit_mut(&mut self, component: Component, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        match component {
            Component::Vit => self.vit.visit_mut("", f),
            Component::TextEncoder => self.text.visit_mut("", f),
            Component::Projector => self.projector.visit_mut("", f),
            Component::Decoder => self.decoder.visit_mut("", f),
        }
    }

    pub fn param_count(&self, component: Component) -> usize {
        let mut n = 0;
        self.visit(component, &mut |_, t| n += t.numel());
        n
    }

    /// `(name, shape)` of every tensor of a component, in storage order.
    pub fn layout(&self, component: Component) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit(component, &mut |name, t| out.push((name.into(), t.shape().to_vec())));
        out
    }

    /// Current contrastive scale `τ` and bias `b`.
    pub fn logit_params(&self) -> (f64, f64) {
        (libm::exp(self.vit.log_tau.item().as_f64()), self.vit.logit_bias.item().as_f64())
    }
}

/// Per-token features `[tokens, hidden]` and unit-norm pooled embedding `[hidden]`.
pub fn encode_image<S: Real>(
    state: &ModelState<S>,
    seq: &TokenSequence,
    mask: Option<&MaskSet>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let mut g = Graph::new();
    let p = params::bind(&state.vit, &mut g, false);
    let out = nets::encode_image(&mut g, &p, &state.config.encoder, seq, mask)?;
    Ok((g.value(out.features).clone(), g.value(out.pooled).clone()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoding<S> {
    pub embedding: Tensor<S>,
    /// The input exceeded its context cap and was cut.
    pub truncated: bool,
}

pub fn encode_text<S: Real>(state: &ModelState<S>, tokens: &TextTokens) -> Result<TextEncoding<S>> {
    let mut g = Graph::new();
    let p = params::bind(&state.text, &mut g, false);
    let e = nets::encode_text(&mut g, &p, &state.config.text, tokens.ids())?;
    Ok(TextEncoding {
        embedding: g.value(e).clone(),
        truncated: tokens.truncated(),
    })
}

/// Maps patch features `[tokens, vit_hidden]` into decoder space.
pub fn project<S: Real>(state: &ModelState<S>, features: &Tensor<S>) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let p = params::bind(&state.projector, &mut g, false);
    let x = g.constant(features.clone());
    let y = nets::project(&mut g, &p, x)?;
    Ok(g.value(y).clone())
}

/// Logits `[text.len(), vocab]`; `prefix` is projected visual tokens with their grid.
pub fn decode<S: Real>(
    state: &ModelState<S>,
    prefix: Option<(&Tensor<S>, (u32, u32))>,
    text: &[u32],
) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let p = params::bind(&state.decoder, &mut g, false);
    let prefix = prefix.map(|(t, grid)| nets::VisualPrefix {
        tokens: g.constant(t.clone()),
        grid,
    });
    let logits = nets::decode(&mut g, &p, &state.config.decoder, prefix, text)?;
    Ok(g.value(logits).clone())
}

/// Greedy continuation of `prompt` given an image; stops at EOS or `max_new` tokens.
pub fn generate<S: Real>(
    state: &ModelState<S>,
    seq: &TokenSequence,
    prompt: &[u32],
    max_new: usize,
) -> Result<Vec<u32>> {
    let (features, _) = encode_image(state, seq, None)?;
    let prefix = project(state, &features)?;
    let mut text: Vec<u32> = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        text.push(tokenizer::PAD);
        let logits = decode(state, Some((&prefix, seq.grid)), &text)?;
        text.pop();
        let last = logits.row(text.len());
        let mut best = 0;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        let next = best as u32;
        if next == tokenizer::EOS {
            break;
        }
        out.push(next);
        text.push(next);
    }
    Ok(out)
}

/// Fresh generator for data-independent randomness in tests and tools.
pub fn init_rng(seed: u64) -> impl Rng {
    rng::stream(seed, rng::streams::INIT)
}
