//! Temporal parsing decoder: learnable queries attend over embedded clip
//! features and produce K temporally ordered part representations.
//!
//! Cross-attention is single-head with a raw inner product and a learnable
//! per-layer temperature: α_{k,t} = softmax_t((p_k + q_k)·v_t / τ), and the
//! part update is the attention-weighted memory sum plus a residual. Each
//! decoder layer then runs multi-head self-attention over the K parts and a
//! position-wise FFN, both with residual connections and layer norm
//! (post-norm by default, pre-norm behind a flag). Clip indices are 1-based
//! throughout.

use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::params::{ParamStore, TapeParams};
use crate::autodiff::tape::{NodeId, Tape};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionalEncoding {
    Off,
    Memory,
    MemoryAndQuery,
}

impl FromStr for PositionalEncoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(PositionalEncoding::Off),
            "memory" => Ok(PositionalEncoding::Memory),
            "memory+query" => Ok(PositionalEncoding::MemoryAndQuery),
            other => Err(Error::Config(format!(
                "unknown positional encoding mode {other:?} (expected off | memory | memory+query)"
            ))),
        }
    }
}

impl std::fmt::Display for PositionalEncoding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PositionalEncoding::Off => "off",
            PositionalEncoding::Memory => "memory",
            PositionalEncoding::MemoryAndQuery => "memory+query",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    /// K: learnable queries / parts.
    pub query_count: usize,
    /// d: model dimension.
    pub model_dim: usize,
    /// L: decoder layers.
    pub layers: usize,
    pub ffn_dim: usize,
    pub self_attention_heads: usize,
    pub temperature_init: f64,
    pub positional_encoding: PositionalEncoding,
    /// Norm placement for the self-attention and FFN sublayers.
    pub pre_norm: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            query_count: 5,
            model_dim: 128,
            layers: 2,
            ffn_dim: 256,
            self_attention_heads: 4,
            temperature_init: 1.0,
            positional_encoding: PositionalEncoding::Off,
            pre_norm: false,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.query_count == 0 {
            return Err(Error::Config("query count must be at least 1".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("need at least one decoder layer".into()));
        }
        if self.model_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("model and FFN dimensions must be positive".into()));
        }
        if self.self_attention_heads == 0
            || self.model_dim % self.self_attention_heads != 0
        {
            return Err(Error::Config(format!(
                "model dim {} must be divisible by head count {}",
                self.model_dim, self.self_attention_heads
            )));
        }
        if !(self.temperature_init > 0.0) {
            return Err(Error::Config(format!(
                "temperature init {} must be positive",
                self.temperature_init
            )));
        }
        Ok(())
    }
}

/// Output of a full decode: final parts, one cross-attention map per layer,
/// and the temperature each layer used.
pub struct PartSet {
    /// `[K, d]` final part representations.
    pub parts: NodeId,
    /// Per layer, `[K, T]`; every row sums to 1.
    pub attention: Vec<NodeId>,
    pub temperatures: Vec<f64>,
}

/// Sinusoidal position code: even slots sin, odd slots cos, geometric
/// wavelengths. Position 0 is [0, 1, 0, 1, ...].
pub fn sinusoid(position: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let pair = (j / 2) as f64;
            let angle = position / 10_000f64.powf(2.0 * pair / dim as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// One cross-attention step: scores are raw inner products between
/// (part + query) rows and memory rows, scaled by 1/τ and softmaxed over
/// clips; parts are updated with the attended memory plus a residual.
/// Returns `(updated parts [K, d], attention [K, T])`.
pub fn cross_attention(
    tape: &mut Tape,
    parts: NodeId,
    queries: NodeId,
    memory: NodeId,
    tau: NodeId,
) -> Result<(NodeId, NodeId)> {
    let probe = tape.add(parts, queries)?;
    let memory_t = tape.transpose(memory)?;
    let scores = tape.matmul(probe, memory_t)?;
    let neg_log_tau = tape.log(tau)?;
    let inv_tau = {
        let n = tape.scale(neg_log_tau, -1.0);
        tape.exp(n)
    };
    let scaled = tape.mul(scores, inv_tau)?;
    let attention = tape.softmax(scaled, 1)?;
    let attended = tape.matmul(attention, memory)?;
    let updated = tape.add(attended, parts)?;
    Ok((updated, attention))
}

pub struct TptDecoder {
    config: DecoderConfig,
    backbone_dim: usize,
}

impl TptDecoder {
    /// Register all decoder parameters (`embed.*`, `decoder.*`) and return
    /// the module handle.
    pub fn register(
        store: &mut ParamStore,
        config: &DecoderConfig,
        backbone_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        if backbone_dim == 0 {
            return Err(Error::Config("backbone dimension must be positive".into()));
        }
        let d = config.model_dim;
        let dh = d / config.self_attention_heads;

        store.register("embed.weight", Tensor::xavier(backbone_dim, d, rng))?;
        store.register("embed.bias", Tensor::zeros(&[1, d]))?;
        store.register(
            "decoder.queries",
            Tensor::randn(&[config.query_count, d], 1.0 / (d as f64).sqrt(), rng),
        )?;
        for l in 0..config.layers {
            store.register(
                &format!("decoder.layer{l}.tau_log"),
                Tensor::new(vec![1], vec![config.temperature_init.ln()])?,
            )?;
            for h in 0..config.self_attention_heads {
                for w in ["wq", "wk", "wv"] {
                    store.register(
                        &format!("decoder.layer{l}.self_attn.head{h}.{w}"),
                        Tensor::xavier(d, dh, rng),
                    )?;
                }
            }
            store.register(
                &format!("decoder.layer{l}.self_attn.out"),
                Tensor::xavier(d, d, rng),
            )?;
            store.register(&format!("decoder.layer{l}.ffn.w1"), Tensor::xavier(d, config.ffn_dim, rng))?;
            store.register(&format!("decoder.layer{l}.ffn.b1"), Tensor::zeros(&[1, config.ffn_dim]))?;
            store.register(&format!("decoder.layer{l}.ffn.w2"), Tensor::xavier(config.ffn_dim, d, rng))?;
            store.register(&format!("decoder.layer{l}.ffn.b2"), Tensor::zeros(&[1, d]))?;
        }
        Ok(TptDecoder {
            config: config.clone(),
            backbone_dim,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    /// Embed raw clips `[T, D]` into memory `[T, d]`, adding position codes
    /// when the memory modes are active.
    pub fn embed(
        &self,
        tape: &mut Tape,
        lease: &mut TapeParams,
        store: &ParamStore,
        clips: &Tensor,
    ) -> Result<NodeId> {
        if clips.shape().len() != 2 || clips.shape()[1] != self.backbone_dim {
            return Err(Error::Contract(format!(
                "clips must be [T, {}], got {:?}",
                self.backbone_dim,
                clips.shape()
            )));
        }
        if !clips.all_finite() {
            return Err(Error::NonFinite {
                context: "clip features entering the embedding".into(),
            });
        }
        let t = clips.shape()[0];
        let x = tape.leaf(clips.clone());
        let w = lease.by_name(tape, store, "embed.weight")?;
        let b = lease.by_name(tape, store, "embed.bias")?;
        let projected = tape.matmul(x, w)?;
        let mut memory = tape.add(projected, b)?;
        if matches!(
            self.config.positional_encoding,
            PositionalEncoding::Memory | PositionalEncoding::MemoryAndQuery
        ) {
            let rows: Vec<Vec<f64>> = (1..=t)
                .map(|pos| sinusoid(pos as f64, self.config.model_dim))
                .collect();
            let pe = tape.leaf(Tensor::from_rows(&rows)?);
            memory = tape.add(memory, pe)?;
        }
        Ok(memory)
    }

    /// The shared query set, with position codes added in memory+query mode
    /// (query k sits at position ⌊T/K⌋·k, k = 1..K).
    pub fn queries(
        &self,
        tape: &mut Tape,
        lease: &mut TapeParams,
        store: &ParamStore,
        t: usize,
    ) -> Result<NodeId> {
        let q = lease.by_name(tape, store, "decoder.queries")?;
        if self.config.positional_encoding == PositionalEncoding::MemoryAndQuery {
            let stride = (t / self.config.query_count).max(1);
            let rows: Vec<Vec<f64>> = (1..=self.config.query_count)
                .map(|k| sinusoid((stride * k) as f64, self.config.model_dim))
                .collect();
            let pe = tape.leaf(Tensor::from_rows(&rows)?);
            return tape.add(q, pe);
        }
        Ok(q)
    }

    /// One decoder layer: temperature cross-attention, multi-head
    /// self-attention over the K parts, position-wise FFN. Returns the
    /// updated parts and this layer's cross-attention map.
    pub fn layer(
        &self,
        tape: &mut Tape,
        lease: &mut TapeParams,
        store: &ParamStore,
        l: usize,
        parts: NodeId,
        queries: NodeId,
        memory: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let tau_log = lease.by_name(tape, store, &format!("decoder.layer{l}.tau_log"))?;
        let tau = tape.exp(tau_log);
        let (mut x, attention) = cross_attention(tape, parts, queries, memory, tau)?;

        if self.config.pre_norm {
            let normed = tape.layer_norm(x, LAYER_NORM_EPS);
            let attended = self.self_attention(tape, lease, store, l, normed)?;
            x = tape.add(x, attended)?;
            let normed = tape.layer_norm(x, LAYER_NORM_EPS);
            let ff = self.ffn(tape, lease, store, l, normed)?;
            x = tape.add(x, ff)?;
        } else {
            let attended = self.self_attention(tape, lease, store, l, x)?;
            let summed = tape.add(x, attended)?;
            x = tape.layer_norm(summed, LAYER_NORM_EPS);
            let ff = self.ffn(tape, lease, store, l, x)?;
            let summed = tape.add(x, ff)?;
            x = tape.layer_norm(summed, LAYER_NORM_EPS);
        }
        if !tape.value(x).all_finite() {
            return Err(Error::NonFinite {
                context: format!("decoder layer {l} output"),
            });
        }
        Ok((x, attention))
    }

    fn self_attention(
        &self,
        tape: &mut Tape,
        lease: &mut TapeParams,
        store: &ParamStore,
        l: usize,
        x: NodeId,
    ) -> Result<NodeId> {
        let dh = self.config.model_dim / self.config.self_attention_heads;
        let mut heads = Vec::with_capacity(self.config.self_attention_heads);
        for h in 0..self.config.self_attention_heads {
            let name = |w: &str| format!("decoder.layer{l}.self_attn.head{h}.{w}");
            let wq = lease.by_name(tape, store, &name("wq"))?;
            let wk = lease.by_name(tape, store, &name("wk"))?;
            let wv = lease.by_name(tape, store, &name("wv"))?;
            let q = tape.matmul(x, wq)?;
            let k = tape.matmul(x, wk)?;
            let v = tape.matmul(x, wv)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let weights = tape.softmax(scaled, 1)?;
            heads.push(tape.matmul(weights, v)?);
        }
        let merged = tape.concat(&heads, 1)?;
        let out = lease.by_name(tape, store, &format!("decoder.layer{l}.self_attn.out"))?;
        tape.matmul(merged, out)
    }

    fn ffn(
        &self,
        tape: &mut Tape,
        lease: &mut TapeParams,
        store: &ParamStore,
        l: usize,
        x: NodeId,
    ) -> Result<NodeId> {
        let w1 = lease.by_name(tape, store, &format!("decoder.layer{l}.ffn.w1"))?;
        let b1 = lease.by_name(tape, store, &format!("decoder.layer{l}.ffn.b1"))?;
        let w2 = lease.by_name(tape, store, &format!("decoder.layer{l}.ffn.w2"))?;
        let b2 = lease.by_name(tape, store, &format!("decoder.layer{l}.ffn.b2"))?;
        let h = tape.matmul(x, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.relu(h);
        let out = tape.matmul(h, w2)?;
        tape.add(out, b2)
    }

    /// Full decode of one video: embed clips, start parts at zero, run all
    /// layers, and return the final parts with every layer's attention map.
    pub fn decode(
        &self,
        tape: &mut Tape,
        lease: &mut TapeParams,
        store: &ParamStore,
        clips: &Tensor,
    ) -> Result<PartSet> {
        let memory = self.embed(tape, lease, store, clips)?;
        let t = clips.shape()[0];
        let queries = self.queries(tape, lease, store, t)?;
        let mut parts = tape.leaf(Tensor::zeros(&[
            self.config.query_count,
            self.config.model_dim,
        ]));
        let mut attention = Vec::with_capacity(self.config.layers);
        let mut temperatures = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let (next, att) = self.layer(tape, lease, store, l, parts, queries, memory)?;
            let tau_log = store.value(store.slot(&format!("decoder.layer{l}.tau_log"))?);
            temperatures.push(tau_log.data()[0].exp());
            parts = next;
            attention.push(att);
        }
        Ok(PartSet {
            parts,
            attention,
            temperatures,
        })
    }
}
