//! Graph-level forward passes of the four networks.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::patching::{MaskSet, TokenSequence, ROPE_BASE};
use crate::real::Real;
use crate::tensor::{Graph, Tensor, Var};

use super::config::{DecoderConfig, EncoderConfig, TextConfig};
use super::params::{Block, DecoderParams, Linear, ProjectorParams, TextParams, VitParams};
use super::tokenizer::{BOS, VOCAB_SIZE};

const LN_EPS: f64 = 1e-5;
/// Added to attention scores of blocked key positions.
const BLOCKED: f64 = -1e9;

pub fn linear<S: Real>(g: &mut Graph<S>, p: &Linear<Var>, x: Var) -> Result<Var> {
    let y = g.matmul(x, p.weight)?;
    g.add(y, p.bias)
}

/// Pre-norm block: multi-head self-attention with rotary positions, then a
/// gated SiLU feed-forward, each on a residual branch.
pub fn block<S: Real>(
    g: &mut Graph<S>,
    p: &Block<Var>,
    x: Var,
    positions: &[(u32, u32)],
    heads: usize,
    base: f64,
    attn_mask: Option<Var>,
) -> Result<Var> {
    let width = g.value(x).cols();
    let head_dim = width / heads;
    let h = g.layer_norm(x, p.norm1.gamma, p.norm1.beta, LN_EPS)?;
    let q = linear(g, &p.q, h)?;
    let k = linear(g, &p.k, h)?;
    let v = linear(g, &p.v, h)?;
    let q = g.rope(q, positions, heads, base)?;
    let k = g.rope(k, positions, heads, base)?;
    let scale = 1.0 / libm::sqrt(head_dim as f64);
    let mut outs = Vec::with_capacity(heads);
    for i in 0..heads {
        let qh = g.slice_cols(q, i * head_dim, head_dim)?;
        let kh = g.slice_cols(k, i * head_dim, head_dim)?;
        let vh = g.slice_cols(v, i * head_dim, head_dim)?;
        let s = g.matmul_nt(qh, kh)?;
        let mut s = g.scale(s, scale);
        if let Some(m) = attn_mask {
            s = g.add(s, m)?;
        }
        let a = g.softmax(s);
        outs.push(g.matmul(a, vh)?);
    }
    let att = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    let o = linear(g, &p.o, att)?;
    let x = g.add(x, o)?;

    let h = g.layer_norm(x, p.norm2.gamma, p.norm2.beta, LN_EPS)?;
    let gate = linear(g, &p.gate, h)?;
    let gate = g.silu(gate);
    let up = linear(g, &p.up, h)?;
    let m = g.mul(gate, up)?;
    let d = linear(g, &p.down, m)?;
    g.add(x, d)
}

/// Outputs of the image encoder.
#[derive(Clone, Copy, Debug)]
pub struct ImageVars {
    /// `[tokens, hidden]`
    pub features: Var,
    /// `[hidden]`, unit norm
    pub pooled: Var,
}

pub fn encode_image<S: Real>(
    g: &mut Graph<S>,
    p: &VitParams<Var>,
    cfg: &EncoderConfig,
    seq: &TokenSequence,
    mask: Option<&MaskSet>,
) -> Result<ImageVars> {
    if seq.patches.cols() != cfg.patch_dim() || seq.patches.rows() != seq.positions.len() {
        return Err(Error::ShapeMismatch {
            op: "encode_image",
            lhs: seq.patches.shape().to_vec(),
            rhs: alloc::vec![seq.positions.len(), cfg.patch_dim()],
        });
    }
    let n = seq.len();
    let patches = g.constant(seq.patches.cast());
    let mut x = linear(g, &p.patch_embed, patches)?;
    if let Some(mask) = mask {
        if mask.token_count != n {
            return Err(Error::ShapeMismatch {
                op: "encode_image.mask",
                lhs: alloc::vec![n],
                rhs: alloc::vec![mask.token_count],
            });
        }
        let indicator = Tensor::from_fn(&[n, 1], |i| if mask.contains(i) { S::one() } else { S::zero() });
        let keep = g.constant(indicator.map(|m| S::one() - m));
        let hit = g.constant(indicator);
        let kept = g.mul(x, keep)?;
        let filled = g.matmul(hit, p.mask_token)?;
        x = g.add(kept, filled)?;
    }
    for b in &p.blocks {
        x = block(g, b, x, &seq.positions, cfg.heads, cfg.rope_base, None)?;
    }
    let features = g.layer_norm(x, p.final_norm.gamma, p.final_norm.beta, LN_EPS)?;
    let mean = g.mean_axis(features, 0)?;
    let pooled = g.normalize_rows(mean);
    Ok(ImageVars { features, pooled })
}

/// Unit-norm text embedding `[embed_dim]` of `[BOS] + ids`.
pub fn encode_text<S: Real>(g: &mut Graph<S>, p: &TextParams<Var>, cfg: &TextConfig, ids: &[u32]) -> Result<Var> {
    let mut seq = Vec::with_capacity(ids.len() + 1);
    seq.push(BOS as usize);
    seq.extend(ids.iter().map(|&i| i as usize));
    let positions: Vec<(u32, u32)> = (0..seq.len() as u32).map(|i| (i, i)).collect();
    let mut x = g.gather(p.token_embed, &seq)?;
    for b in &p.blocks {
        x = block(g, b, x, &positions, cfg.heads, ROPE_BASE, None)?;
    }
    let x = g.layer_norm(x, p.final_norm.gamma, p.final_norm.beta, LN_EPS)?;
    let mean = g.mean_axis(x, 0)?;
    let width = g.value(mean).numel();
    let mean = g.reshape(mean, &[1, width])?;
    let e = linear(g, &p.head, mean)?;
    let e = g.normalize_rows(e);
    let d = g.value(e).numel();
    g.reshape(e, &[d])
}

pub fn project<S: Real>(g: &mut Graph<S>, p: &ProjectorParams<Var>, features: Var) -> Result<Var> {
    let h = linear(g, &p.fc1, features)?;
    let h = g.silu(h);
    linear(g, &p.fc2, h)
}

/// Visual tokens already mapped into the decoder width, with their grid.
#[derive(Clone, Copy, Debug)]
pub struct VisualPrefix {
    pub tokens: Var,
    pub grid: (u32, u32),
}

/// Positions of a decoder sequence: visual tokens at their grid cell, text
/// token `i` at `(o + i, o + i)` with `o = max(rows, cols)`.
pub fn decoder_positions(grid: Option<(u32, u32)>, text_len: usize) -> Vec<(u32, u32)> {
    let mut pos = Vec::new();
    let mut offset = 0;
    if let Some((rows, cols)) = grid {
        for r in 0..rows {
            for c in 0..cols {
                pos.push((r, c));
            }
        }
        offset = rows.max(cols);
    }
    pos.extend((0..text_len as u32).map(|i| (offset + i, offset + i)));
    pos
}

/// `allowed(q, k) = k < prefix || k <= q`
pub fn decoder_mask<S: Real>(prefix: usize, total: usize) -> Tensor<S> {
    Tensor::from_fn(&[total, total], |i| {
        let (q, k) = (i / total, i % total);
        if k < prefix || k <= q {
            S::zero()
        } else {
            S::of(BLOCKED)
        }
    })
}

/// Next-token logits `[L, vocab]` for target text `y` of length `L`:
/// row `i` scores `y_i` given the visual prefix and `y_<i`.
pub fn decode<S: Real>(
    g: &mut Graph<S>,
    p: &DecoderParams<Var>,
    cfg: &DecoderConfig,
    prefix: Option<VisualPrefix>,
    text: &[u32],
) -> Result<Var> {
    if text.is_empty() {
        return Err(Error::invalid("decode: empty text"));
    }
    if let Some(bad) = text.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
        return Err(Error::invalid(alloc::format!("decode: token id {bad} outside vocabulary")));
    }
    let mut inputs = Vec::with_capacity(text.len());
    inputs.push(BOS as usize);
    inputs.extend(text[..text.len() - 1].iter().map(|&t| t as usize));
    let emb = g.gather(p.token_embed, &inputs)?;
    let (mut x, prefix_len, grid) = match prefix {
        Some(vp) if g.value(vp.tokens).rows() > 0 => {
            let rows = g.value(vp.tokens).rows();
            if rows != (vp.grid.0 * vp.grid.1) as usize || g.value(vp.tokens).cols() != cfg.hidden {
                return Err(Error::ShapeMismatch {
                    op: "decode.prefix",
                    lhs: g.value(vp.tokens).shape().to_vec(),
                    rhs: alloc::vec![(vp.grid.0 * vp.grid.1) as usize, cfg.hidden],
                });
            }
            (g.concat(&[vp.tokens, emb], 0)?, rows, Some(vp.grid))
        }
        _ => (emb, 0, None),
    };
    let total = prefix_len + text.len();
    let positions = decoder_positions(grid, text.len());
    let mask = g.constant(decoder_mask(prefix_len, total));
    for b in &p.blocks {
        x = block(g, b, x, &positions, cfg.heads, ROPE_BASE, Some(mask))?;
    }
    let x = if prefix_len > 0 {
        let ids: Vec<usize> = (prefix_len..total).collect();
        g.gather(x, &ids)?
    } else {
        x
    };
    let x = g.layer_norm(x, p.final_norm.gamma, p.final_norm.beta, LN_EPS)?;
    linear(g, &p.lm_head, x)
}
