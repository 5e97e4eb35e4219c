//! Parameterized layer forwards composed from graph primitives: linear,
//! multi-head attention, feed-forward, separable convolution, layer norm.
//! Each `*Params` struct resolves store paths into graph leaves once per
//! forward pass.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::scalar::Scalar;
use crate::numerics::store::ParamStore;
use crate::numerics::tensor::Tensor;

pub const INIT_SIGMA: f64 = 0.02;

/// `y = x . w (+ b)` with gradient flow to all three operands.
pub fn linear<F: Scalar>(
    g: &mut Graph<F>,
    x: NodeId,
    w: NodeId,
    b: Option<NodeId>,
) -> Result<NodeId> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_bias(y, b),
        None => Ok(y),
    }
}

pub struct MhaParams {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

impl MhaParams {
    pub fn load<F: Scalar>(g: &mut Graph<F>, store: &ParamStore<F>, prefix: &str) -> Result<Self> {
        Ok(Self {
            wq: g.param(store, &format!("{prefix}wq"))?,
            bq: g.param(store, &format!("{prefix}bq"))?,
            wk: g.param(store, &format!("{prefix}wk"))?,
            bk: g.param(store, &format!("{prefix}bk"))?,
            wv: g.param(store, &format!("{prefix}wv"))?,
            bv: g.param(store, &format!("{prefix}bv"))?,
            wo: g.param(store, &format!("{prefix}wo"))?,
            bo: g.param(store, &format!("{prefix}bo"))?,
        })
    }

    pub fn init<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, hidden: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        for name in ["wq", "wk", "wv", "wo"] {
            store.insert(
                &format!("{prefix}{name}"),
                Tensor::randn_truncated(&[hidden, hidden], INIT_SIGMA, rng),
            )?;
        }
        for name in ["bq", "bk", "bv", "bo"] {
            store.insert(&format!("{prefix}{name}"), Tensor::zeros(&[hidden]))?;
        }
        Ok(())
    }
}

/// Scaled-dot-product multi-head attention with Q,K,V,O projections.
/// Output shape equals input shape.
pub fn mha_forward<F: Scalar>(
    g: &mut Graph<F>,
    x: NodeId,
    p: &MhaParams,
    heads: usize,
) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("mha expects [B,S,H], got {shape:?}")));
    }
    let (b, s, h) = (shape[0], shape[1], shape[2]);
    if heads == 0 || h % heads != 0 {
        return Err(Error::Config(format!("hidden {h} not divisible by {heads} heads")));
    }
    let dh = h / heads;
    let split = |g: &mut Graph<F>, n: NodeId| -> Result<NodeId> {
        let r = g.reshape(n, vec![b, s, heads, dh])?;
        g.swap_axes(r, 1, 2) // [B, heads, S, dh]
    };
    let q = linear(g, x, p.wq, Some(p.bq))?;
    let k = linear(g, x, p.wk, Some(p.bk))?;
    let v = linear(g, x, p.wv, Some(p.bv))?;
    let q = split(g, q)?;
    let k = split(g, k)?;
    let v = split(g, v)?;
    let kt = g.swap_axes(k, 2, 3)?; // [B, heads, dh, S]
    let scores = g.bmm(q, kt)?;
    let scores = g.scale(scores, F::from_f64(1.0 / (dh as f64).sqrt()));
    let attn = g.softmax_last(scores)?;
    let ctx = g.bmm(attn, v)?; // [B, heads, S, dh]
    let ctx = g.swap_axes(ctx, 1, 2)?;
    let ctx = g.reshape(ctx, vec![b, s, h])?;
    linear(g, ctx, p.wo, Some(p.bo))
}

pub struct FfnParams {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl FfnParams {
    pub fn load<F: Scalar>(g: &mut Graph<F>, store: &ParamStore<F>, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: g.param(store, &format!("{prefix}w1"))?,
            b1: g.param(store, &format!("{prefix}b1"))?,
            w2: g.param(store, &format!("{prefix}w2"))?,
            b2: g.param(store, &format!("{prefix}b2"))?,
        })
    }

    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        hidden: usize,
        intermediate: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        store.insert(
            &format!("{prefix}w1"),
            Tensor::randn_truncated(&[hidden, intermediate], INIT_SIGMA, rng),
        )?;
        store.insert(&format!("{prefix}b1"), Tensor::zeros(&[intermediate]))?;
        store.insert(
            &format!("{prefix}w2"),
            Tensor::randn_truncated(&[intermediate, hidden], INIT_SIGMA, rng),
        )?;
        store.insert(&format!("{prefix}b2"), Tensor::zeros(&[hidden]))?;
        Ok(())
    }
}

/// `linear(H -> intermediate) -> GELU -> linear(intermediate -> H)`.
pub fn ffn_forward<F: Scalar>(g: &mut Graph<F>, x: NodeId, p: &FfnParams) -> Result<NodeId> {
    let intermediate = g.shape(p.w1)[1];
    if intermediate == 0 {
        return Err(Error::Config("ffn intermediate size must be positive".into()));
    }
    let h = linear(g, x, p.w1, Some(p.b1))?;
    let h = g.gelu(h);
    linear(g, h, p.w2, Some(p.b2))
}

pub struct SepConvParams {
    pub depthwise: NodeId,
    pub pointwise: NodeId,
    pub bias: NodeId,
}

impl SepConvParams {
    pub fn load<F: Scalar>(g: &mut Graph<F>, store: &ParamStore<F>, prefix: &str) -> Result<Self> {
        Ok(Self {
            depthwise: g.param(store, &format!("{prefix}dw"))?,
            pointwise: g.param(store, &format!("{prefix}pw"))?,
            bias: g.param(store, &format!("{prefix}pb"))?,
        })
    }

    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        hidden: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("separable conv kernel must be odd, got {kernel}")));
        }
        store.insert(
            &format!("{prefix}dw"),
            Tensor::randn_truncated(&[kernel, hidden], INIT_SIGMA, rng),
        )?;
        store.insert(
            &format!("{prefix}pw"),
            Tensor::randn_truncated(&[hidden, hidden], INIT_SIGMA, rng),
        )?;
        store.insert(&format!("{prefix}pb"), Tensor::zeros(&[hidden]))?;
        Ok(())
    }
}

/// Depthwise 1-D convolution, pointwise `H x H` projection, then GELU.
pub fn sepconv_forward<F: Scalar>(g: &mut Graph<F>, x: NodeId, p: &SepConvParams) -> Result<NodeId> {
    let dw = g.depthwise_conv1d(x, p.depthwise)?;
    let pw = linear(g, dw, p.pointwise, Some(p.bias))?;
    Ok(g.gelu(pw))
}

pub struct LayerNormParams {
    pub gain: NodeId,
    pub bias: NodeId,
}

impl LayerNormParams {
    pub fn load<F: Scalar>(g: &mut Graph<F>, store: &ParamStore<F>, prefix: &str) -> Result<Self> {
        Ok(Self {
            gain: g.param(store, &format!("{prefix}ln_g"))?,
            bias: g.param(store, &format!("{prefix}ln_b"))?,
        })
    }

    pub fn init<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, hidden: usize) -> Result<()> {
        store.insert(&format!("{prefix}ln_g"), Tensor::full(&[hidden], F::one()))?;
        store.insert(&format!("{prefix}ln_b"), Tensor::zeros(&[hidden]))?;
        Ok(())
    }
}

pub fn layernorm<F: Scalar>(g: &mut Graph<F>, x: NodeId, p: &LayerNormParams) -> Result<NodeId> {
    g.layer_norm(x, p.gain, p.bias)
}
