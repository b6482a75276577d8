//! Parameter containers.
//!
//! Every container is generic over its leaf type: `Tensor<S>` for stored
//! weights, [`Var`] once bound into a graph. [`ParamTree`] walks leaves in
//! a fixed order with dotted path names, which is also the checkpoint order.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::real::Real;
use crate::tensor::{Graph, Tensor, Var};

use super::config::{DecoderConfig, EncoderConfig, TextConfig};
use super::tokenizer::VOCAB_SIZE;

pub trait ParamTree<T> {
    type Out<U>;

    fn map_ref<U>(&self, path: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Self::Out<U>;
    fn visit(&self, path: &str, f: &mut dyn FnMut(&str, &T));
    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut T));
}

fn join(path: &str, name: &str) -> String {
    if path.is_empty() {
        name.into()
    } else {
        format!("{path}.{name}")
    }
}

macro_rules! param_tree {
    (@map leaf, $x:expr, $p:expr, $f:ident) => { $f($p, $x) };
    (@map tree, $x:expr, $p:expr, $f:ident) => { $x.map_ref($p, $f) };
    (@map list, $x:expr, $p:expr, $f:ident) => {
        $x.iter().enumerate().map(|(i, b)| b.map_ref(&join($p, &format!("{i}")), $f)).collect()
    };
    (@visit leaf, $x:expr, $p:expr, $f:ident) => { $f($p, $x) };
    (@visit tree, $x:expr, $p:expr, $f:ident) => { $x.visit($p, $f) };
    (@visit list, $x:expr, $p:expr, $f:ident) => {
        for (i, b) in $x.iter().enumerate() { b.visit(&join($p, &format!("{i}")), $f) }
    };
    (@visit_mut leaf, $x:expr, $p:expr, $f:ident) => { $f($p, $x) };
    (@visit_mut tree, $x:expr, $p:expr, $f:ident) => { $x.visit_mut($p, $f) };
    (@visit_mut list, $x:expr, $p:expr, $f:ident) => {
        for (i, b) in $x.iter_mut().enumerate() { b.visit_mut(&join($p, &format!("{i}")), $f) }
    };
    ($name:ident { $($field:ident : $kind:tt),* $(,)? }) => {
        impl<T> ParamTree<T> for $name<T> {
            type Out<U> = $name<U>;

            fn map_ref<U>(&self, path: &str, f: &mut dyn FnMut(&str, &T) -> U) -> $name<U> {
                $name {
                    $($field: param_tree!(@map $kind, &self.$field, &join(path, stringify!($field)), f),)*
                }
            }

            fn visit(&self, path: &str, f: &mut dyn FnMut(&str, &T)) {
                $(param_tree!(@visit $kind, &self.$field, &join(path, stringify!($field)), f);)*
            }

            fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut T)) {
                $(param_tree!(@visit_mut $kind, &mut self.$field, &join(path, stringify!($field)), f);)*
            }
        }
    };
}

/// Affine map `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}
param_tree!(Linear { weight: leaf, bias: leaf });

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gamma: T,
    pub beta: T,
}
param_tree!(Norm { gamma: leaf, beta: leaf });

/// Pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub norm1: Norm<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub norm2: Norm<T>,
    pub gate: Linear<T>,
    pub up: Linear<T>,
    pub down: Linear<T>,
}
param_tree!(Block {
    norm1: tree,
    q: tree,
    k: tree,
    v: tree,
    o: tree,
    norm2: tree,
    gate: tree,
    up: tree,
    down: tree,
});

/// Image encoder, including the contrastive logit scale and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct VitParams<T> {
    pub patch_embed: Linear<T>,
    pub mask_token: T,
    pub blocks: Vec<Block<T>>,
    pub final_norm: Norm<T>,
    /// `ln τ`, so that `τ = exp(log_tau) > 0`.
    pub log_tau: T,
    pub logit_bias: T,
}
param_tree!(VitParams {
    patch_embed: tree,
    mask_token: leaf,
    blocks: list,
    final_norm: tree,
    log_tau: leaf,
    logit_bias: leaf,
});

#[derive(Clone, Debug, PartialEq)]
pub struct TextParams<T> {
    pub token_embed: T,
    pub blocks: Vec<Block<T>>,
    pub final_norm: Norm<T>,
    pub head: Linear<T>,
}
param_tree!(TextParams {
    token_embed: leaf,
    blocks: list,
    final_norm: tree,
    head: tree,
});

/// Two affine layers with SiLU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorParams<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}
param_tree!(ProjectorParams { fc1: tree, fc2: tree });

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<T> {
    pub token_embed: T,
    pub blocks: Vec<Block<T>>,
    pub final_norm: Norm<T>,
    pub lm_head: Linear<T>,
}
param_tree!(DecoderParams {
    token_embed: leaf,
    blocks: list,
    final_norm: tree,
    lm_head: tree,
});

/// Initial `τ` and `b` of the sigmoid contrastive head.
pub const INIT_TAU: f64 = 10.0;
pub const INIT_LOGIT_BIAS: f64 = -1.0;

struct Init<'a, R: Rng> {
    rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    fn normal<S: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<S> {
        Tensor::from_fn(shape, |_| {
            let z: f64 = self.rng.sample(StandardNormal);
            S::of(z * std)
        })
    }

    fn linear<S: Real>(&mut self, fan_in: usize, fan_out: usize, gain: f64) -> Linear<Tensor<S>> {
        Linear {
            weight: self.normal(&[fan_in, fan_out], gain / libm::sqrt(fan_in as f64)),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    fn norm<S: Real>(&mut self, width: usize) -> Norm<Tensor<S>> {
        Norm {
            gamma: Tensor::full(&[width], S::one()),
            beta: Tensor::zeros(&[width]),
        }
    }

    fn block<S: Real>(&mut self, hidden: usize, intermediate: usize, depth: usize) -> Block<Tensor<S>> {
        // Residual branches are damped so that depth does not blow up activations.
        let out_gain = 1.0 / libm::sqrt(2.0 * depth as f64);
        Block {
            norm1: self.norm(hidden),
            q: self.linear(hidden, hidden, 1.0),
            k: self.linear(hidden, hidden, 1.0),
            v: self.linear(hidden, hidden, 1.0),
            o: self.linear(hidden, hidden, out_gain),
            norm2: self.norm(hidden),
            gate: self.linear(hidden, intermediate, 1.0),
            up: self.linear(hidden, intermediate, 1.0),
            down: self.linear(intermediate, hidden, out_gain),
        }
    }
}

impl<S: Real> VitParams<Tensor<S>> {
    pub fn init(cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let mut init = Init { rng };
        let h = cfg.hidden;
        Self {
            patch_embed: init.linear(cfg.patch_dim(), h, 1.0),
            mask_token: init.normal(&[1, h], 0.02),
            blocks: (0..cfg.depth).map(|_| init.block(h, cfg.intermediate, cfg.depth)).collect(),
            final_norm: init.norm(h),
            log_tau: Tensor::full(&[1], S::of(libm::log(INIT_TAU))),
            logit_bias: Tensor::full(&[1], S::of(INIT_LOGIT_BIAS)),
        }
    }
}

impl<S: Real> TextParams<Tensor<S>> {
    pub fn init(cfg: &TextConfig, embed_dim: usize, rng: &mut impl Rng) -> Self {
        let mut init = Init { rng };
        let h = cfg.hidden;
        Self {
            token_embed: init.normal(&[VOCAB_SIZE, h], 1.0),
            blocks: (0..cfg.depth).map(|_| init.block(h, cfg.intermediate, cfg.depth)).collect(),
            final_norm: init.norm(h),
            head: init.linear(h, embed_dim, 1.0),
        }
    }
}

impl<S: Real> ProjectorParams<Tensor<S>> {
    pub fn init(vision_hidden: usize, cfg: &DecoderConfig, rng: &mut impl Rng) -> Self {
        let mut init = Init { rng };
        Self {
            fc1: init.linear(vision_hidden, cfg.projector_hidden, 1.0),
            fc2: init.linear(cfg.projector_hidden, cfg.hidden, 1.0),
        }
    }
}

impl<S: Real> DecoderParams<Tensor<S>> {
    pub fn init(cfg: &DecoderConfig, rng: &mut impl Rng) -> Self {
        let mut init = Init { rng };
        let h = cfg.hidden;
        Self {
            token_embed: init.normal(&[VOCAB_SIZE, h], 1.0),
            blocks: (0..cfg.depth).map(|_| init.block(h, cfg.intermediate, cfg.depth)).collect(),
            final_norm: init.norm(h),
            lm_head: init.linear(h, VOCAB_SIZE, 1.0),
        }
    }
}

/// Number of scalar parameters in a stored tree.
pub fn count<S: Real, P: ParamTree<Tensor<S>>>(tree: &P) -> usize {
    let mut n = 0;
    tree.visit("", &mut |_, t| n += t.numel());
    n
}

/// Copies every leaf into `graph`.
pub fn bind<S: Real, P: ParamTree<Tensor<S>>>(tree: &P, graph: &mut Graph<S>, requires_grad: bool) -> P::Out<Var> {
    tree.map_ref("", &mut |_, t| graph.leaf(t.clone(), requires_grad))
}

/// Gradients of bound leaves in visit order (zeros where none flowed).
pub fn grads<S: Real, P: ParamTree<Var>>(bound: &P, graph: &Graph<S>) -> Vec<Tensor<S>> {
    let mut out = Vec::new();
    bound.visit("", &mut |_, v| {
        out.push(
            graph
                .grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(graph.value(*v).shape())),
        )
    });
    out
}
