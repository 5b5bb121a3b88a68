//! Attention kernels used by the mesh VAE and the flow transformer.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Mask, Var};
use super::nn::{Init, Linear};
use super::param::ParamStore;
use super::tensor::{Real, Tensor};

/// How an adjacency predicate enters the attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Disallowed logits are set to −∞ before the softmax.
    #[default]
    NegInf,
    /// Logits are multiplied elementwise by the 0/1 adjacency, so non-edges
    /// keep a logit of 0.
    LiteralHadamard,
}

/// Output of an attention call together with its row-stochastic map.
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    pub out: Var,
    pub weights: Var,
}

/// Bias-free query/key/value projections for single-head self-attention.
#[derive(Debug, Clone, Copy)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        name: &str,
        dim: usize,
        dk: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::new(
                store,
                &format!("{name}.q"),
                dim,
                dk,
                false,
                Init::FanIn,
                rng,
            ),
            k: Linear::new(
                store,
                &format!("{name}.k"),
                dim,
                dk,
                false,
                Init::FanIn,
                rng,
            ),
            v: Linear::new(
                store,
                &format!("{name}.v"),
                dim,
                dim,
                false,
                Init::FanIn,
                rng,
            ),
        }
    }

    pub fn dk(&self) -> usize {
        self.q.out_dim
    }
}

/// `softmax(mask(QKᵀ/√dk)) · V + x`.
///
/// `mask` is a dense `N × N` predicate (normally a reflexive adjacency).
/// Under [`MaskMode::LiteralHadamard`] the predicate scales the logits
/// instead, and only `key_valid` (when given) still excludes columns.
pub fn masked_self_attention<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    w: &SelfAttention,
    x: Var,
    mask: &Mask,
    key_valid: Option<usize>,
    mode: MaskMode,
) -> Attended {
    let q = w.q.forward(g, store, x);
    let k = w.k.forward(g, store, x);
    let v = w.v.forward(g, store, x);
    let logits = g.matmul_nt(q, k);
    let logits = g.scale(logits, T::lit(1.0 / (w.dk() as f64).sqrt()));
    let weights = match mode {
        MaskMode::NegInf => g.softmax(logits, Some(mask.clone())),
        MaskMode::LiteralHadamard => {
            let (n, m) = g.shape(logits);
            let gate = Tensor::from_fn(n, m, |i, j| {
                if mask.allows(m, i, j) {
                    T::one()
                } else {
                    T::zero()
                }
            });
            let gate = g.constant(gate);
            let gated = g.mul(logits, gate);
            g.softmax(gated, key_valid.map(Mask::KeyPrefix))
        }
    };
    let mixed = g.matmul(weights, v);
    Attended {
        out: g.add(mixed, x),
        weights,
    }
}

/// One attention map driving two value streams.
#[derive(Debug, Clone, Copy)]
pub struct SharedMapAttention {
    pub q: Linear,
    pub k: Linear,
    pub va: Linear,
    pub vb: Linear,
}

impl SharedMapAttention {
    /// `query_dim`/`key_dim` are the widths of the inputs the map is computed
    /// from; `a_dim`/`b_dim` the widths of the two value streams.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        name: &str,
        query_dim: usize,
        key_dim: usize,
        dk: usize,
        a_dim: usize,
        b_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::new(
                store,
                &format!("{name}.q"),
                query_dim,
                dk,
                false,
                Init::FanIn,
                rng,
            ),
            k: Linear::new(
                store,
                &format!("{name}.k"),
                key_dim,
                dk,
                false,
                Init::FanIn,
                rng,
            ),
            va: Linear::new(
                store,
                &format!("{name}.va"),
                a_dim,
                a_dim,
                false,
                Init::FanIn,
                rng,
            ),
            vb: Linear::new(
                store,
                &format!("{name}.vb"),
                b_dim,
                b_dim,
                false,
                Init::FanIn,
                rng,
            ),
        }
    }

    pub fn dk(&self) -> usize {
        self.q.out_dim
    }
}

/// Inputs of [`shared_map_cross_attention`].
#[derive(Debug, Clone, Copy)]
pub struct SharedMapInputs {
    pub query: Var,
    pub key: Var,
    pub value_a: Var,
    pub value_b: Var,
    pub residual_a: Var,
    pub residual_b: Var,
}

/// `A = softmax(q'k'ᵀ/√dk)` computed once, returning
/// `(A·proj_a(v_a) + res_a, A·proj_b(v_b) + res_b)`.
pub fn shared_map_cross_attention<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    w: &SharedMapAttention,
    inp: SharedMapInputs,
    key_valid: Option<usize>,
) -> (Attended, Var) {
    let q = w.q.forward(g, store, inp.query);
    let k = w.k.forward(g, store, inp.key);
    let logits = g.matmul_nt(q, k);
    let logits = g.scale(logits, T::lit(1.0 / (w.dk() as f64).sqrt()));
    let weights = g.softmax(logits, key_valid.map(Mask::KeyPrefix));
    let va = w.va.forward(g, store, inp.value_a);
    let vb = w.vb.forward(g, store, inp.value_b);
    let mixed_a = g.matmul(weights, va);
    let mixed_b = g.matmul(weights, vb);
    let out_a = g.add(mixed_a, inp.residual_a);
    let out_b = g.add(mixed_b, inp.residual_b);
    (
        Attended {
            out: out_a,
            weights,
        },
        out_b,
    )
}

/// Query/key projections for residual-free cross attention whose values are
/// used as given.
#[derive(Debug, Clone, Copy)]
pub struct CrossAttentionMap {
    pub q: Linear,
    pub k: Linear,
}

impl CrossAttentionMap {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        name: &str,
        query_dim: usize,
        key_dim: usize,
        dk: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::new(
                store,
                &format!("{name}.q"),
                query_dim,
                dk,
                false,
                Init::FanIn,
                rng,
            ),
            k: Linear::new(
                store,
                &format!("{name}.k"),
                key_dim,
                dk,
                false,
                Init::FanIn,
                rng,
            ),
        }
    }

    /// `softmax(q'k'ᵀ/√dk) · value`
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        query: Var,
        key: Var,
        value: Var,
        key_valid: Option<usize>,
    ) -> Attended {
        let q = self.q.forward(g, store, query);
        let k = self.k.forward(g, store, key);
        let logits = g.matmul_nt(q, k);
        let logits = g.scale(logits, T::lit(1.0 / (self.q.out_dim as f64).sqrt()));
        let weights = g.softmax(logits, key_valid.map(Mask::KeyPrefix));
        Attended {
            out: g.matmul(weights, value),
            weights,
        }
    }
}

/// Scaled dot-product attention over already projected `q`, `k`, `v`, split
/// into `heads` equal column groups.
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Var {
    let (_, dim) = g.shape(q);
    assert!(
        heads >= 1 && dim % heads == 0,
        "model width {dim} not divisible by {heads} heads"
    );
    let dh = dim / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let logits = g.matmul_nt(qh, kh);
        let logits = g.scale(logits, scale);
        let a = g.softmax(logits, None);
        outs.push(g.matmul(a, vh));
    }
    if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    }
}

/// Dense mask that allows every pair among the first `valid` rows/columns
/// and keeps the diagonal for the rest.
pub fn full_mask(n: usize, valid: usize) -> Mask {
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = (i < valid && j < valid) || i == j;
        }
    }
    Mask::Dense(Arc::new(m))
}
