use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::{ParamId, ParamStore};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map `y = x W^T + b` with `W: [out x in]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    /// Registers `{prefix}.weight` (Glorot uniform) and `{prefix}.bias` (zeros).
    pub fn new(store: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = store.glorot(format!("{prefix}.weight"), out_dim, in_dim, rng);
        let bias = store.zeros(format!("{prefix}.bias"), vec![1, out_dim]);
        Self {
            weight,
            bias: Some(bias),
            in_dim,
            out_dim,
        }
    }

    /// Linear map `y = x W^T` with no bias tensor.
    pub fn without_bias(store: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: store.glorot(format!("{prefix}.weight"), out_dim, in_dim, rng),
            bias: None,
            in_dim,
            out_dim,
        }
    }

    /// `x: [B x in] -> [B x out]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let xw = g.matmul_bt(x, w);
        match self.bias {
            Some(bias) => {
                let b = g.param(bias);
                g.add(xw, b)
            }
            None => xw,
        }
    }
}

/// Scaled dot-product attention `softmax(q k^T / sqrt(d)) v` for one sequence.
pub fn attention(g: &mut Graph<'_>, q: Var, k: Var, v: Var, dim: usize) -> Var {
    let scores = g.matmul_bt(q, k);
    let scaled = g.scale(scores, 1.0 / (dim as f64).sqrt());
    let weights = g.softmax_rows(scaled);
    g.matmul(weights, v)
}

/// Layer-norm scale and shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        Self {
            gamma: store.filled(format!("{prefix}.gamma"), vec![1, dim], 1.0),
            beta: store.zeros(format!("{prefix}.beta"), vec![1, dim]),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// Shape hyperparameters of a [`TransformerLayer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerDims {
    pub model_dim: usize,
    pub heads: usize,
}

/// Pre-norm encoder block: `h = x + Attn(LN(x))`, `y = h + FF(LN(h))`, with a
/// GELU feedforward of width `4 * model_dim`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformerLayer {
    pub dims: TransformerDims,
    pub norm_attn: LayerNorm,
    pub query: DenseLayer,
    pub key: DenseLayer,
    pub value: DenseLayer,
    pub output: DenseLayer,
    pub norm_ff: LayerNorm,
    pub ff_in: DenseLayer,
    pub ff_out: DenseLayer,
}

impl TransformerLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, dims: TransformerDims, rng: &mut impl Rng) -> Self {
        assert!(
            dims.heads > 0 && dims.model_dim.is_multiple_of(dims.heads),
            "model_dim {} not divisible by {} heads",
            dims.model_dim,
            dims.heads
        );
        let d = dims.model_dim;
        Self {
            dims,
            norm_attn: LayerNorm::new(store, &format!("{prefix}.norm_attn"), d),
            query: DenseLayer::new(store, &format!("{prefix}.attn.query"), d, d, rng),
            // a key bias only shifts each query's scores uniformly, which softmax ignores
            key: DenseLayer::without_bias(store, &format!("{prefix}.attn.key"), d, d, rng),
            value: DenseLayer::new(store, &format!("{prefix}.attn.value"), d, d, rng),
            output: DenseLayer::new(store, &format!("{prefix}.attn.output"), d, d, rng),
            norm_ff: LayerNorm::new(store, &format!("{prefix}.norm_ff"), d),
            ff_in: DenseLayer::new(store, &format!("{prefix}.ff.0"), d, 4 * d, rng),
            ff_out: DenseLayer::new(store, &format!("{prefix}.ff.1"), 4 * d, d, rng),
        }
    }

    /// Applies the block to `seqs` stacked sequences of `seq_len` tokens each
    /// (`x: [seqs * seq_len x model_dim]`). Attention never crosses sequences.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, seq_len: usize) -> Var {
        let rows = g.value(x).rows();
        assert_eq!(rows % seq_len, 0, "{rows} tokens do not split into sequences of {seq_len}");
        let seqs = rows / seq_len;
        let head_dim = self.dims.model_dim / self.dims.heads;

        let normed = self.norm_attn.forward(g, x);
        let q = self.query.forward(g, normed);
        let k = self.key.forward(g, normed);
        let v = self.value.forward(g, normed);
        let mut per_seq = Vec::with_capacity(seqs);
        for s in 0..seqs {
            let qs = g.slice_rows(q, s * seq_len, seq_len);
            let ks = g.slice_rows(k, s * seq_len, seq_len);
            let vs = g.slice_rows(v, s * seq_len, seq_len);
            let mixed = if self.dims.heads == 1 {
                attention(g, qs, ks, vs, head_dim)
            } else {
                let heads: Vec<Var> = (0..self.dims.heads)
                    .map(|h| {
                        let qh = g.slice_cols(qs, h * head_dim, head_dim);
                        let kh = g.slice_cols(ks, h * head_dim, head_dim);
                        let vh = g.slice_cols(vs, h * head_dim, head_dim);
                        attention(g, qh, kh, vh, head_dim)
                    })
                    .collect();
                g.concat_cols(&heads)
            };
            per_seq.push(mixed);
        }
        let attended = if seqs == 1 { per_seq[0] } else { g.concat_rows(&per_seq) };
        let projected = self.output.forward(g, attended);
        let h = g.add(x, projected);

        let normed = self.norm_ff.forward(g, h);
        let hidden = self.ff_in.forward(g, normed);
        let hidden = g.gelu(hidden);
        let ff = self.ff_out.forward(g, hidden);
        g.add(h, ff)
    }
}
