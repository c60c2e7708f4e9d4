//! Vision transformer building blocks: patch projection, fixed 2-D
//! sinusoidal positions, multi-head self-attention, single-head
//! cross-attention for feature injection, and the pre-norm block.

use crate::error::{config_err, contract_err, Result};
use crate::params::{Init, ParamSpec, Scope};
use crate::tensor::{Real, Tensor, Var};

/// Shared epsilon for layer norm and variance normalization.
pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

pub fn linear<'g, T: Real>(x: Var<'g, T>, w: Var<'g, T>, b: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
    let y = x.matmul(w)?;
    Ok(match b {
        Some(b) => y.add(b)?,
        None => y,
    })
}

/// `x · w + b` reading `{scope}.w` and, when bound, `{scope}.b`.
pub fn dense<'g, T: Real>(x: Var<'g, T>, p: &Scope<'_, 'g, T>) -> Result<Var<'g, T>> {
    let b = if p.has("b") { Some(p.get("b")?) } else { None };
    linear(x, p.get("w")?, b)
}

pub fn norm<'g, T: Real>(x: Var<'g, T>, p: &Scope<'_, 'g, T>) -> Result<Var<'g, T>> {
    Ok(x.layer_norm(p.get("gain")?, p.get("bias")?, T::of(LN_EPS))?)
}

/// One token per flattened patch; positions are added by the caller.
pub fn patch_embed<'g, T: Real>(
    patches: Var<'g, T>,
    proj: Var<'g, T>,
    bias: Option<Var<'g, T>>,
) -> Result<Var<'g, T>> {
    linear(patches, proj, bias)
}

fn sincos_1d(pos: f64, dim: usize, out: &mut Vec<f64>) {
    let quarter = dim / 2;
    let freqs: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    out.extend(freqs.iter().map(|w| (pos * w).sin()));
    out.extend(freqs.iter().map(|w| (pos * w).cos()));
}

/// Fixed 2-D sin-cos table of shape `[grid_h * grid_w, dim]`, rows in
/// row-major grid order. Half the width encodes the row, half the column.
pub fn positional_embedding<T: Real>(grid_h: usize, grid_w: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 4 != 0 {
        return Err(config_err!("positional embedding width {dim} must be a positive multiple of 4"));
    }
    let mut data = Vec::with_capacity(grid_h * grid_w * dim);
    for r in 0..grid_h {
        for c in 0..grid_w {
            sincos_1d(r as f64, dim / 2, &mut data);
            sincos_1d(c as f64, dim / 2, &mut data);
        }
    }
    Ok(Tensor::new(vec![grid_h * grid_w, dim], data.into_iter().map(T::of).collect())?)
}

fn attention_specs(prefix: &str, d_in: usize, d_model: usize) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    for name in ["q", "k", "v"] {
        v.push(ParamSpec::new(format!("{prefix}.{name}.w"), [d_in, d_model], Init::TruncNormal(INIT_STD)));
        v.push(ParamSpec::new(format!("{prefix}.{name}.b"), [d_model], Init::Zeros));
    }
    v.push(ParamSpec::new(format!("{prefix}.out.w"), [d_model, d_model], Init::Zeros));
    v.push(ParamSpec::new(format!("{prefix}.out.b"), [d_model], Init::Zeros));
    v
}

pub(crate) fn norm_specs(prefix: &str, dim: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.gain"), [dim], Init::Ones),
        ParamSpec::new(format!("{prefix}.bias"), [dim], Init::Zeros),
    ]
}

/// Multi-head scaled dot-product self-attention. Returns the projected
/// output `[T, d]` and the attention weights `[heads, T, T]`.
pub fn self_attention_with_weights<'g, T: Real>(
    x: Var<'g, T>,
    p: &Scope<'_, 'g, T>,
    heads: usize,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let shape = x.shape();
    let (tokens, d) = (shape[0], shape[1]);
    if heads == 0 || d % heads != 0 {
        return Err(config_err!("width {d} is not divisible by {heads} heads"));
    }
    let dh = d / heads;
    let split = |v: Var<'g, T>| -> Result<Var<'g, T>> {
        Ok(v.reshape(vec![tokens, heads, dh])?.transpose(0, 1)?)
    };
    let q = split(dense(x, &p.sub("q"))?)?;
    let k = dense(x, &p.sub("k"))?
        .reshape(vec![tokens, heads, dh])?
        .permute(&[1, 2, 0])?;
    let v = split(dense(x, &p.sub("v"))?)?;
    let scores = q.matmul(k)?.scale(T::one() / T::of(dh as f64).sqrt());
    let weights = scores.softmax(2)?;
    let ctx = weights
        .matmul(v)?
        .transpose(0, 1)?
        .reshape(vec![tokens, d])?;
    Ok((dense(ctx, &p.sub("out"))?, weights))
}

pub fn self_attention<'g, T: Real>(x: Var<'g, T>, p: &Scope<'_, 'g, T>, heads: usize) -> Result<Var<'g, T>> {
    Ok(self_attention_with_weights(x, p, heads)?.0)
}

/// Feature-injection cross-attention settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossAttentionConfig {
    /// Width of the injected encoder feature (keys and values read from it).
    pub inject_dim: usize,
    /// Layer-normalize the queries before projecting them.
    pub prenorm: bool,
    /// Apply an output projection to the attended values.
    pub out_proj: bool,
}

fn cross_attention_specs(prefix: &str, d_dec: usize, cfg: &CrossAttentionConfig) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    if cfg.prenorm {
        v.extend(norm_specs(&format!("{prefix}.norm"), d_dec));
    }
    v.push(ParamSpec::new(format!("{prefix}.q.w"), [d_dec, d_dec], Init::TruncNormal(INIT_STD)));
    v.push(ParamSpec::new(format!("{prefix}.k.w"), [cfg.inject_dim, d_dec], Init::TruncNormal(INIT_STD)));
    v.push(ParamSpec::new(format!("{prefix}.v.w"), [cfg.inject_dim, d_dec], Init::TruncNormal(INIT_STD)));
    if cfg.out_proj {
        v.push(ParamSpec::new(format!("{prefix}.out.w"), [d_dec, d_dec], Init::Zeros));
        v.push(ParamSpec::new(format!("{prefix}.out.b"), [d_dec], Init::Zeros));
    }
    v
}

/// `queries + softmax(Q Kᵀ / sqrt(d_dec)) V` with `Q` from the decoder
/// stream and `K`, `V` from the injected encoder feature. Single head;
/// the optional query norm and output projection are read from the scope
/// when bound. Returns the output and the `[T, T_inject]` weights.
pub fn cross_attention_with_weights<'g, T: Real>(
    queries: Var<'g, T>,
    inject: Var<'g, T>,
    p: &Scope<'_, 'g, T>,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let d_dec = queries.shape()[1];
    let q_in = if p.has("norm.gain") {
        norm(queries, &p.sub("norm"))?
    } else {
        queries
    };
    let q = q_in.matmul(p.get("q.w")?)?;
    let k = inject.matmul(p.get("k.w")?)?;
    let v = inject.matmul(p.get("v.w")?)?;
    let scores = q
        .matmul(k.transpose(0, 1)?)?
        .scale(T::one() / T::of(d_dec as f64).sqrt());
    let weights = scores.softmax(1)?;
    let mut ctx = weights.matmul(v)?;
    if p.has("out.w") {
        ctx = dense(ctx, &p.sub("out"))?;
    }
    Ok((queries.add(ctx)?, weights))
}

pub fn cross_attention<'g, T: Real>(
    queries: Var<'g, T>,
    inject: Var<'g, T>,
    p: &Scope<'_, 'g, T>,
) -> Result<Var<'g, T>> {
    Ok(cross_attention_with_weights(queries, inject, p)?.0)
}

/// Pre-norm transformer block; decoder blocks carry a cross-attention
/// sub-block between self-attention and the MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub cross: Option<CrossAttentionConfig>,
}

impl BlockConfig {
    pub fn param_specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let d = self.dim;
        let hidden = d * self.mlp_ratio;
        let mut v = norm_specs(&format!("{prefix}.norm1"), d);
        v.extend(attention_specs(&format!("{prefix}.attn"), d, d));
        if let Some(c) = &self.cross {
            v.extend(cross_attention_specs(&format!("{prefix}.xattn"), d, c));
        }
        v.extend(norm_specs(&format!("{prefix}.norm2"), d));
        v.push(ParamSpec::new(format!("{prefix}.mlp.fc1.w"), [d, hidden], Init::TruncNormal(INIT_STD)));
        v.push(ParamSpec::new(format!("{prefix}.mlp.fc1.b"), [hidden], Init::Zeros));
        v.push(ParamSpec::new(format!("{prefix}.mlp.fc2.w"), [hidden, d], Init::Zeros));
        v.push(ParamSpec::new(format!("{prefix}.mlp.fc2.b"), [d], Init::Zeros));
        v
    }

    fn mlp<'g, T: Real>(x: Var<'g, T>, p: &Scope<'_, 'g, T>) -> Result<Var<'g, T>> {
        dense(dense(x, &p.sub("fc1"))?.gelu(), &p.sub("fc2"))
    }

    /// Encoder form: no injection argument exists.
    pub fn forward_self<'g, T: Real>(&self, x: Var<'g, T>, p: &Scope<'_, 'g, T>) -> Result<Var<'g, T>> {
        if self.cross.is_some() {
            return Err(contract_err!("block {} expects an injected feature", p.prefix()));
        }
        self.forward(x, p, None)
    }

    /// Self-attention + residual, then cross-attention with its own residual
    /// when configured, then MLP + residual.
    pub fn forward<'g, T: Real>(
        &self,
        x: Var<'g, T>,
        p: &Scope<'_, 'g, T>,
        inject: Option<Var<'g, T>>,
    ) -> Result<Var<'g, T>> {
        let mut h = x.add(self_attention(norm(x, &p.sub("norm1"))?, &p.sub("attn"), self.heads)?)?;
        match (&self.cross, inject) {
            (Some(c), Some(f)) => {
                let fd = f.shape()[1];
                if fd != c.inject_dim {
                    return Err(contract_err!(
                        "block {}: injected width {fd}, expected {}",
                        p.prefix(),
                        c.inject_dim
                    ));
                }
                h = cross_attention(h, f, &p.sub("xattn"))?;
            }
            (None, None) => {}
            (Some(_), None) => {
                return Err(contract_err!("block {} expects an injected feature", p.prefix()))
            }
            (None, Some(_)) => {
                return Err(contract_err!("block {} has no cross-attention", p.prefix()))
            }
        }
        Ok(h.add(Self::mlp(norm(h, &p.sub("norm2"))?, &p.sub("mlp"))?)?)
    }
}
