use super::{lit, Element, Graph, NodeId, TensorError};
use indexmap::IndexMap;

/// Graph-registered weights of one attention layer. Projection matrices are
/// `[d,d]`, biases `[d]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormWeights {
    pub gamma: NodeId,
    pub beta: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpWeights {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct TransformerBlockWeights {
    pub ln1: LayerNormWeights,
    pub attn: AttentionWeights,
    pub ln2: LayerNormWeights,
    pub mlp: MlpWeights,
}

fn fetch(ids: &IndexMap<String, NodeId>, name: &str) -> NodeId {
    *ids.get(name).unwrap_or_else(|| panic!("missing registered parameter {name}"))
}

impl AttentionWeights {
    pub fn from_ids(ids: &IndexMap<String, NodeId>, prefix: &str) -> Self {
        Self {
            wq: fetch(ids, &format!("{prefix}.wq")),
            bq: fetch(ids, &format!("{prefix}.bq")),
            wk: fetch(ids, &format!("{prefix}.wk")),
            bk: fetch(ids, &format!("{prefix}.bk")),
            wv: fetch(ids, &format!("{prefix}.wv")),
            bv: fetch(ids, &format!("{prefix}.bv")),
            wo: fetch(ids, &format!("{prefix}.wo")),
            bo: fetch(ids, &format!("{prefix}.bo")),
        }
    }
}

impl LayerNormWeights {
    pub fn from_ids(ids: &IndexMap<String, NodeId>, prefix: &str) -> Self {
        Self {
            gamma: fetch(ids, &format!("{prefix}.gamma")),
            beta: fetch(ids, &format!("{prefix}.beta")),
        }
    }
}

impl MlpWeights {
    pub fn from_ids(ids: &IndexMap<String, NodeId>, prefix: &str) -> Self {
        Self {
            w1: fetch(ids, &format!("{prefix}.w1")),
            b1: fetch(ids, &format!("{prefix}.b1")),
            w2: fetch(ids, &format!("{prefix}.w2")),
            b2: fetch(ids, &format!("{prefix}.b2")),
        }
    }
}

impl TransformerBlockWeights {
    pub fn from_ids(ids: &IndexMap<String, NodeId>, prefix: &str) -> Self {
        Self {
            ln1: LayerNormWeights::from_ids(ids, &format!("{prefix}.ln1")),
            attn: AttentionWeights::from_ids(ids, &format!("{prefix}.attn")),
            ln2: LayerNormWeights::from_ids(ids, &format!("{prefix}.ln2")),
            mlp: MlpWeights::from_ids(ids, &format!("{prefix}.mlp")),
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Standard multi-head softmax self-attention over `tokens` `[n,d]`.
///
/// `mask`, when given, has length `n`; tokens flagged `false` receive zero
/// attention weight as keys and contribute nothing to any output.
pub fn multi_head_attention<E: Element>(
    g: &mut Graph<E>,
    tokens: NodeId,
    w: &AttentionWeights,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<NodeId, TensorError> {
    let d = g.value(tokens).cols();
    let n = g.value(tokens).rows();
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::DimNotDivisibleByHeads { dim: d, heads });
    }
    if let Some(m) = mask {
        if m.len() != n {
            return Err(TensorError::ShapeMismatch(format!(
                "attention mask len {} vs {} tokens",
                m.len(),
                n
            )));
        }
    }
    let dh = d / heads;
    let scale = lit::<E>(1.0 / (dh as f64).sqrt());

    let q0 = g.matmul(tokens, w.wq)?;
    let q = g.add_row_broadcast(q0, w.bq)?;
    let k0 = g.matmul(tokens, w.wk)?;
    let k = g.add_row_broadcast(k0, w.bk)?;
    let v0 = g.matmul(tokens, w.wv)?;
    let v = g.add_row_broadcast(v0, w.bv)?;

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, scale);
        let probs = g.softmax_rows(scaled, mask)?;
        head_outputs.push(g.matmul(probs, vh)?);
    }
    let merged = g.concat_cols(&head_outputs)?;
    let out = g.matmul(merged, w.wo)?;
    g.add_row_broadcast(out, w.bo)
}

/// Two-layer GELU MLP.
pub fn mlp<E: Element>(
    g: &mut Graph<E>,
    x: NodeId,
    w: &MlpWeights,
) -> Result<NodeId, TensorError> {
    let h0 = g.matmul(x, w.w1)?;
    let h1 = g.add_row_broadcast(h0, w.b1)?;
    let h2 = g.gelu(h1);
    let o = g.matmul(h2, w.w2)?;
    g.add_row_broadcast(o, w.b2)
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `x + MLP(LN(x))`.
pub fn transformer_block<E: Element>(
    g: &mut Graph<E>,
    x: NodeId,
    w: &TransformerBlockWeights,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<NodeId, TensorError> {
    let eps = lit::<E>(LAYER_NORM_EPS);
    let n1 = g.layer_norm(x, w.ln1.gamma, w.ln1.beta, eps)?;
    let a = multi_head_attention(g, n1, &w.attn, heads, mask)?;
    let x1 = g.add(x, a)?;
    let n2 = g.layer_norm(x1, w.ln2.gamma, w.ln2.beta, eps)?;
    let m = mlp(g, n2, &w.mlp)?;
    g.add(x1, m)
}
