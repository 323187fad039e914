//! Patch-based transformer forecaster: instance-normalized context split
//! into non-overlapping patch tokens, linear embedding plus learned
//! positions, pre-norm encoder layers, flatten-and-project head, and
//! de-normalization with the remembered context statistics.

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};

use super::{BoundParams, Init, ModelConfig, ParamSpec};

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-5;

fn n_patches(input_size: usize, patch_length: usize) -> usize {
    input_size.div_ceil(patch_length)
}

pub(crate) fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.hidden_size;
    let p = cfg.patch_length;
    let n = n_patches(cfg.input_size, p);
    let mut specs = vec![
        ParamSpec::new("ptst.embed.w", &[p, d], Init::Weight { fan_in: p }),
        ParamSpec::new("ptst.embed.b", &[d], Init::Zero),
        ParamSpec::new("ptst.pos", &[n, d], Init::Weight { fan_in: d }),
    ];
    for l in 0..cfg.n_layers {
        for name in ["q", "k", "v", "o"] {
            specs.push(ParamSpec::new(
                format!("ptst.l{l}.attn.{name}.w"),
                &[d, d],
                Init::Weight { fan_in: d },
            ));
            specs.push(ParamSpec::new(
                format!("ptst.l{l}.attn.{name}.b"),
                &[d],
                Init::Zero,
            ));
        }
        specs.push(ParamSpec::new(format!("ptst.l{l}.ln1.g"), &[d], Init::One));
        specs.push(ParamSpec::new(format!("ptst.l{l}.ln1.b"), &[d], Init::Zero));
        specs.push(ParamSpec::new(format!("ptst.l{l}.ln2.g"), &[d], Init::One));
        specs.push(ParamSpec::new(format!("ptst.l{l}.ln2.b"), &[d], Init::Zero));
        specs.push(ParamSpec::new(
            format!("ptst.l{l}.ff.w1"),
            &[d, cfg.ff_dim],
            Init::Weight { fan_in: d },
        ));
        specs.push(ParamSpec::new(format!("ptst.l{l}.ff.b1"), &[cfg.ff_dim], Init::Zero));
        specs.push(ParamSpec::new(
            format!("ptst.l{l}.ff.w2"),
            &[cfg.ff_dim, d],
            Init::Weight { fan_in: cfg.ff_dim },
        ));
        specs.push(ParamSpec::new(format!("ptst.l{l}.ff.b2"), &[d], Init::Zero));
    }
    specs.push(ParamSpec::new(
        "ptst.head.w",
        &[n * d, cfg.horizon],
        Init::Weight { fan_in: n * d },
    ));
    specs.push(ParamSpec::new("ptst.head.b", &[cfg.horizon], Init::Zero));
    specs
}

/// Split a `[batch, L]` context into `[batch, n_patches, patch_length]`
/// non-overlapping patches. When `patch_length` does not divide `L`, the
/// tail is padded by repeating the final value before splitting.
pub fn patch_context(
    g: &Graph,
    contexts: Tensor,
    patch_length: usize,
) -> Result<Tensor> {
    let shape = g.shape(contexts);
    let (batch, l) = (shape[0], shape[1]);
    if patch_length == 0 || patch_length > l {
        return Err(Error::invalid(format!(
            "patch length {patch_length} out of range for context length {l}"
        )));
    }
    let n = n_patches(l, patch_length);
    let padded = if n * patch_length == l {
        contexts
    } else {
        let pad = n * patch_length - l;
        let last = g.slice_last(contexts, l - 1, l)?;
        let tail = g.expand_last(last, pad)?;
        g.concat_last(&[contexts, tail])?
    };
    g.reshape(padded, &[batch, n, patch_length])
}

fn affine_layer_norm(g: &Graph, x: Tensor, gamma: Tensor, beta: Tensor) -> Result<Tensor> {
    let normed = g.layer_norm_last(x, LN_EPS)?;
    g.add_broadcast(g.mul_broadcast(normed, gamma)?, beta)
}

/// Linear map applied tokenwise: `[B, n, d_in] @ w[d_in, d_out] + b`.
fn token_linear(g: &Graph, x: Tensor, w: Tensor, b: Tensor) -> Result<Tensor> {
    let shape = g.shape(x);
    let (bsz, n, d_in) = (shape[0], shape[1], shape[2]);
    let d_out = g.shape(w)[1];
    let flat = g.reshape(x, &[bsz * n, d_in])?;
    let out = g.add_broadcast(g.matmul(flat, w)?, b)?;
    g.reshape(out, &[bsz, n, d_out])
}

fn multi_head_attention(
    g: &Graph,
    cfg: &ModelConfig,
    p: &BoundParams,
    layer: usize,
    x: Tensor,
) -> Result<Tensor> {
    let d = cfg.hidden_size;
    let dh = d / cfg.n_heads;
    let q = token_linear(g, x, p.get(&format!("ptst.l{layer}.attn.q.w")), p.get(&format!("ptst.l{layer}.attn.q.b")))?;
    let k = token_linear(g, x, p.get(&format!("ptst.l{layer}.attn.k.w")), p.get(&format!("ptst.l{layer}.attn.k.b")))?;
    let v = token_linear(g, x, p.get(&format!("ptst.l{layer}.attn.v.w")), p.get(&format!("ptst.l{layer}.attn.v.b")))?;

    let mut heads = Vec::with_capacity(cfg.n_heads);
    let scale = 1.0 / (dh as f64).sqrt();
    for h in 0..cfg.n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_last(q, lo, hi)?;
        let kh = g.slice_last(k, lo, hi)?;
        let vh = g.slice_last(v, lo, hi)?;
        let scores = g.mul_const(g.bmm(qh, g.transpose_last(kh)?)?, scale)?;
        let attn = g.softmax_last(scores)?;
        heads.push(g.bmm(attn, vh)?);
    }
    let merged = g.concat_last(&heads)?;
    token_linear(
        g,
        merged,
        p.get(&format!("ptst.l{layer}.attn.o.w")),
        p.get(&format!("ptst.l{layer}.attn.o.b")),
    )
}

pub(crate) fn forward(
    cfg: &ModelConfig,
    p: &BoundParams,
    g: &Graph,
    contexts: Tensor,
) -> Result<Tensor> {
    let shape = g.shape(contexts);
    let (bsz, l) = (shape[0], shape[1]);
    let d = cfg.hidden_size;

    // instance normalization; stats kept for the inverse transform
    let mean = g.reshape(g.mean_axis(contexts, 1)?, &[bsz, 1])?;
    let centered = g.sub(contexts, g.expand_last(mean, l)?)?;
    let var = g.reshape(g.mean_axis(g.mul(centered, centered)?, 1)?, &[bsz, 1])?;
    let denom = g.add_const(g.sqrt(var)?, NORM_EPS)?;
    let normed = g.div(centered, g.expand_last(denom, l)?)?;

    let patches = patch_context(g, normed, cfg.patch_length)?;
    let n = g.shape(patches)[1];
    let embedded = token_linear(g, patches, p.get("ptst.embed.w"), p.get("ptst.embed.b"))?;
    let mut x = g.add_broadcast(embedded, p.get("ptst.pos"))?;

    for layer in 0..cfg.n_layers {
        let ln1 = affine_layer_norm(
            g,
            x,
            p.get(&format!("ptst.l{layer}.ln1.g")),
            p.get(&format!("ptst.l{layer}.ln1.b")),
        )?;
        x = g.add(x, multi_head_attention(g, cfg, p, layer, ln1)?)?;

        let ln2 = affine_layer_norm(
            g,
            x,
            p.get(&format!("ptst.l{layer}.ln2.g")),
            p.get(&format!("ptst.l{layer}.ln2.b")),
        )?;
        let ff = token_linear(
            g,
            g.gelu(token_linear(
                g,
                ln2,
                p.get(&format!("ptst.l{layer}.ff.w1")),
                p.get(&format!("ptst.l{layer}.ff.b1")),
            )?)?,
            p.get(&format!("ptst.l{layer}.ff.w2")),
            p.get(&format!("ptst.l{layer}.ff.b2")),
        )?;
        x = g.add(x, ff)?;
    }

    let flat = g.reshape(x, &[bsz, n * d])?;
    let out = g.add_broadcast(g.matmul(flat, p.get("ptst.head.w"))?, p.get("ptst.head.b"))?;

    // undo the instance normalization
    let scaled = g.mul(out, g.expand_last(denom, cfg.horizon)?)?;
    g.add(scaled, g.expand_last(mean, cfg.horizon)?)
}
