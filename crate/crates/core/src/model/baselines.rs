use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Tensor, TensorError, Var};

use super::ModelConfig;

pub(crate) const CNN_BLOCKS: usize = 3;

/// Spatial size after the three conv/pool blocks.
pub(crate) fn cnn_output_hw(window_len: usize, subcarriers: usize) -> (usize, usize) {
    let mut hw = (window_len, subcarriers);
    for _ in 0..CNN_BLOCKS {
        hw = (hw.0 / 2, hw.1 / 2);
    }
    hw
}

pub(crate) fn cnn_flat_len(cfg: &ModelConfig) -> usize {
    let (h, w) = cnn_output_hw(cfg.window_len, cfg.subcarriers);
    cfg.cnn_channels * h * w
}

fn add_head(store: &mut ParamStore, cfg: &ModelConfig, fan_in: usize, rng: &mut ChaCha8Rng) -> Result<(), TensorError> {
    store.add_uniform("head.hidden.W", &[fan_in, cfg.d_model], fan_in, rng)?;
    store.add_zeros("head.hidden.b", &[cfg.d_model])?;
    store.add_uniform("head.out.W", &[cfg.d_model, cfg.classes], cfg.d_model, rng)?;
    store.add_zeros("head.out.b", &[cfg.classes])?;
    Ok(())
}

pub(crate) fn add_mlp_params(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<(), TensorError> {
    add_head(store, cfg, 2 * cfg.subcarriers, rng)
}

pub(crate) fn add_cnn_params(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<(), TensorError> {
    let mut cin = 2;
    for block in 0..CNN_BLOCKS {
        let c = cfg.cnn_channels;
        store.add_uniform(format!("cnn.conv{block}.W"), &[c, cin, 3, 3], cin * 9, rng)?;
        store.add_zeros(format!("cnn.conv{block}.b"), &[c])?;
        cin = c;
    }
    add_head(store, cfg, cnn_flat_len(cfg), rng)
}

fn param(g: &mut Graph, store: &ParamStore, name: &str) -> Var {
    g.param(store, store.id(name).unwrap_or_else(|| panic!("parameter `{name}` missing")))
}

/// Hidden layer with ReLU then dropout, then the output layer. `x: [1, F]`.
fn head(g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, x: Var) -> Result<Var, TensorError> {
    let w = param(g, store, "head.hidden.W");
    let b = param(g, store, "head.hidden.b");
    let h = g.matmul(x, w)?;
    let h = g.add(h, b)?;
    let h = g.relu(h);
    let h = g.dropout(h, cfg.dropout)?;
    let w = param(g, store, "head.out.W");
    let b = param(g, store, "head.out.b");
    let y = g.matmul(h, w)?;
    g.add(y, b)
}

pub(crate) fn mlp_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    amp: &Tensor,
    phase: &Tensor,
) -> Result<Var, TensorError> {
    let a = g.input(amp.clone());
    let ph = g.input(phase.clone());
    let a = g.mean(a, 0)?;
    let ph = g.mean(ph, 0)?;
    let x = g.concat(&[a, ph])?;
    let k2 = g.value(x).len();
    let x = g.reshape(x, &[1, k2])?;
    head(g, store, cfg, x)
}

pub(crate) fn cnn_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    amp: &Tensor,
    phase: &Tensor,
) -> Result<Var, TensorError> {
    let (w, k) = (amp.shape()[0], amp.shape()[1]);
    let mut stacked = Vec::with_capacity(2 * w * k);
    stacked.extend_from_slice(amp.data());
    stacked.extend_from_slice(phase.data());
    let mut x = g.input(Tensor::new([2, w, k], stacked)?);
    for block in 0..CNN_BLOCKS {
        let cw = param(g, store, &format!("cnn.conv{block}.W"));
        let cb = param(g, store, &format!("cnn.conv{block}.b"));
        x = g.conv2d(x, cw, cb, 1)?;
        x = g.relu(x);
        x = g.max_pool2d(x)?;
    }
    let flat = g.value(x).len();
    let x = g.reshape(x, &[1, flat])?;
    head(g, store, cfg, x)
}

pub(crate) fn mlp_param_count(cfg: &ModelConfig) -> usize {
    head_param_count(cfg, 2 * cfg.subcarriers)
}

pub(crate) fn cnn_param_count(cfg: &ModelConfig) -> usize {
    let c = cfg.cnn_channels;
    let convs = (c * 2 * 9 + c) + (CNN_BLOCKS - 1) * (c * c * 9 + c);
    convs + head_param_count(cfg, cnn_flat_len(cfg))
}

fn head_param_count(cfg: &ModelConfig, fan_in: usize) -> usize {
    fan_in * cfg.d_model + cfg.d_model + cfg.d_model * cfg.classes + cfg.classes
}
