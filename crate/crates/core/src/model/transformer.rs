use crate::autodiff::{Graph, ParamStore, Tensor, TensorError, Var};

use super::{ModelConfig, ModelError};

/// Standard sinusoidal encoding: `sin` on even columns, `cos` on odd ones.
pub fn sinusoidal_pe(len: usize, d_model: usize) -> Result<Tensor, ModelError> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(ModelError::Config(format!(
            "positional encoding needs an even d_model, got {d_model}"
        )));
    }
    Ok(Tensor::from_fn([len, d_model], |i| {
        let (pos, col) = (i / d_model, i % d_model);
        let pair = (col / 2 * 2) as f64;
        let angle = pos as f64 / 10000f64.powf(pair / d_model as f64);
        if col % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

/// Projection weights of one attention block, already placed in a graph.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Self-attention over the rows of `h: [W, d]`. Returns the projected
/// output and the `[W, W]` attention weights of each head.
pub fn multi_head_attention(
    g: &mut Graph,
    h: Var,
    w: AttentionWeights,
    heads: usize,
    scale_denominator: f64,
) -> Result<(Var, Vec<Var>), TensorError> {
    let d = g.value(h).last_dim();
    let dk = d / heads;
    let q = g.matmul(h, w.wq)?;
    let k = g.matmul(h, w.wk)?;
    let v = g.matmul(h, w.wv)?;
    let mut outputs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = g.slice_last(q, head * dk, dk)?;
        let kh = g.slice_last(k, head * dk, dk)?;
        let vh = g.slice_last(v, head * dk, dk)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, 1.0 / scale_denominator);
        let attn = g.softmax(scaled)?;
        outputs.push(g.matmul(attn, vh)?);
        weights.push(attn);
    }
    let joined = if heads == 1 { outputs[0] } else { g.concat(&outputs)? };
    Ok((g.matmul(joined, w.wo)?, weights))
}

/// Intermediate values of one encoder layer.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub attention: Vec<Var>,
    pub h1: Var,
    pub z: Var,
}

#[derive(Debug, Clone)]
pub struct BranchTrace {
    pub embedded: Var,
    pub layers: Vec<LayerTrace>,
    pub pooled: Var,
}

pub(crate) fn add_branch_params(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &ModelConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(), TensorError> {
    let (d, k, ff) = (cfg.d_model, cfg.subcarriers, cfg.d_ff);
    store.add_uniform(format!("{prefix}.in.W"), &[k, d], k, rng)?;
    store.add_zeros(format!("{prefix}.in.b"), &[d])?;
    for layer in 0..cfg.encoder_layers {
        let p = format!("{prefix}.enc{layer}");
        for name in ["Wq", "Wk", "Wv", "Wo"] {
            store.add_uniform(format!("{p}.attn.{name}"), &[d, d], d, rng)?;
        }
        store.add_ones(format!("{p}.ln1.gain"), &[d])?;
        store.add_zeros(format!("{p}.ln1.bias"), &[d])?;
        store.add_uniform(format!("{p}.ffn.W1"), &[d, ff], d, rng)?;
        store.add_zeros(format!("{p}.ffn.b1"), &[ff])?;
        store.add_uniform(format!("{p}.ffn.W2"), &[ff, d], ff, rng)?;
        store.add_zeros(format!("{p}.ffn.b2"), &[d])?;
        store.add_ones(format!("{p}.ln2.gain"), &[d])?;
        store.add_zeros(format!("{p}.ln2.bias"), &[d])?;
    }
    Ok(())
}

fn p(g: &mut Graph, store: &ParamStore, name: &str) -> Var {
    let id = store
        .id(name)
        .unwrap_or_else(|| panic!("parameter `{name}` missing from store"));
    g.param(store, id)
}

/// One encoder layer: attention and feed-forward sublayers, each with
/// dropout, a residual connection and layer normalization.
pub(crate) fn encoder_layer(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    cfg: &ModelConfig,
    h: Var,
) -> Result<LayerTrace, TensorError> {
    let w = AttentionWeights {
        wq: p(g, store, &format!("{prefix}.attn.Wq")),
        wk: p(g, store, &format!("{prefix}.attn.Wk")),
        wv: p(g, store, &format!("{prefix}.attn.Wv")),
        wo: p(g, store, &format!("{prefix}.attn.Wo")),
    };
    let (attn_out, attention) = multi_head_attention(g, h, w, cfg.heads, cfg.attention_scale())?;
    let attn_out = g.dropout(attn_out, cfg.dropout)?;
    let res1 = g.add(h, attn_out)?;
    let (gain1, bias1) = (
        p(g, store, &format!("{prefix}.ln1.gain")),
        p(g, store, &format!("{prefix}.ln1.bias")),
    );
    let h1 = g.layer_norm(res1, gain1, bias1, cfg.ln_eps)?;

    let w1 = p(g, store, &format!("{prefix}.ffn.W1"));
    let b1 = p(g, store, &format!("{prefix}.ffn.b1"));
    let w2 = p(g, store, &format!("{prefix}.ffn.W2"));
    let b2 = p(g, store, &format!("{prefix}.ffn.b2"));
    let a = g.matmul(h1, w1)?;
    let a = g.add(a, b1)?;
    let a = g.relu(a);
    let f = g.matmul(a, w2)?;
    let f = g.add(f, b2)?;
    let f = g.dropout(f, cfg.dropout)?;
    let res2 = g.add(h1, f)?;
    let (gain2, bias2) = (
        p(g, store, &format!("{prefix}.ln2.gain")),
        p(g, store, &format!("{prefix}.ln2.bias")),
    );
    let z = g.layer_norm(res2, gain2, bias2, cfg.ln_eps)?;
    Ok(LayerTrace { attention, h1, z })
}

/// Input projection, positional encoding, encoder stack and temporal mean.
pub(crate) fn branch_forward(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    cfg: &ModelConfig,
    pe: Option<&Tensor>,
    x: &Tensor,
) -> Result<BranchTrace, TensorError> {
    let xi = g.input(x.clone());
    let w_in = p(g, store, &format!("{prefix}.in.W"));
    let b_in = p(g, store, &format!("{prefix}.in.b"));
    let h = g.matmul(xi, w_in)?;
    let mut h = g.add(h, b_in)?;
    if let Some(pe) = pe {
        let pe = g.input(pe.clone());
        h = g.add(h, pe)?;
    }
    h = g.dropout(h, cfg.input_dropout)?;
    let embedded = h;
    let mut layers = Vec::with_capacity(cfg.encoder_layers);
    for layer in 0..cfg.encoder_layers {
        let trace = encoder_layer(g, store, &format!("{prefix}.enc{layer}"), cfg, h)?;
        h = trace.z;
        layers.push(trace);
    }
    let pooled = g.mean(h, 0)?;
    Ok(BranchTrace {
        embedded,
        layers,
        pooled,
    })
}

pub(crate) fn branch_param_count(cfg: &ModelConfig) -> usize {
    let (d, k, ff) = (cfg.d_model, cfg.subcarriers, cfg.d_ff);
    let layer = 4 * d * d + 2 * d + d * ff + ff + ff * d + d + 2 * d;
    k * d + d + cfg.encoder_layers * layer
}
