//! Dual-branch transformer classifier and the MLP and CNN baselines.
//!
//! Every model maps an amplitude window and a phase window, both `W × K`,
//! to `N` unnormalized logits. Parameters live in a [`ParamStore`] with
//! dotted names such as `amp.enc0.attn.Wq`.

mod baselines;
mod checkpoint;
mod transformer;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, ParamStore, Tensor, TensorError, Var};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use transformer::{
    multi_head_attention, sinusoidal_pe, AttentionWeights, BranchTrace, LayerTrace,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input shape {found:?} does not match model window {expected:?}")]
    InputShape {
        expected: (usize, usize),
        found: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Transformer,
    Mlp,
    Cnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Transformer, ModelKind::Mlp, ModelKind::Cnn];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Transformer => "transformer",
            ModelKind::Mlp => "mlp",
            ModelKind::Cnn => "cnn",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "transformer" => Ok(ModelKind::Transformer),
            "mlp" => Ok(ModelKind::Mlp),
            "cnn" => Ok(ModelKind::Cnn),
            other => Err(format!("unknown model kind `{other}` (transformer, mlp, cnn)")),
        }
    }
}

/// Architecture hyperparameters plus the data shape the model expects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// Dropout after the input projection; off by default.
    pub input_dropout: f64,
    pub window_len: usize,
    pub subcarriers: usize,
    pub classes: usize,
    pub encoder_layers: usize,
    /// Divide attention scores by `sqrt(d_model)` rather than the per-head
    /// `sqrt(d_model / heads)`.
    pub scale_full_dmodel: bool,
    pub positional_encoding: bool,
    pub ln_eps: f64,
    pub cnn_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Transformer,
            d_model: 32,
            heads: 4,
            d_ff: 64,
            dropout: 0.2,
            input_dropout: 0.0,
            window_len: 100,
            subcarriers: 52,
            classes: 6,
            encoder_layers: 1,
            scale_full_dmodel: false,
            positional_encoding: true,
            ln_eps: 1e-5,
            cnn_channels: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        for (name, v) in [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("window_len", self.window_len),
            ("subcarriers", self.subcarriers),
            ("cnn_channels", self.cnn_channels),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        for (name, p) in [("dropout", self.dropout), ("input_dropout", self.input_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1), got {p}"));
            }
        }
        if !(self.ln_eps > 0.0) {
            return bad(format!("ln_eps must be positive, got {}", self.ln_eps));
        }
        match self.kind {
            ModelKind::Transformer => {
                if self.d_model % self.heads != 0 {
                    return bad(format!(
                        "d_model {} not divisible by heads {}",
                        self.d_model, self.heads
                    ));
                }
                if self.d_ff == 0 || self.encoder_layers == 0 {
                    return bad("d_ff and encoder_layers must be positive".into());
                }
                if self.positional_encoding && self.d_model % 2 != 0 {
                    return bad(format!("positional encoding needs even d_model, got {}", self.d_model));
                }
            }
            ModelKind::Cnn => {
                let (h, w) = baselines::cnn_output_hw(self.window_len, self.subcarriers);
                if h == 0 || w == 0 {
                    return bad(format!(
                        "window {}x{} too small for three 2x2 poolings",
                        self.window_len, self.subcarriers
                    ));
                }
            }
            ModelKind::Mlp => {}
        }
        Ok(())
    }

    pub fn attention_scale(&self) -> f64 {
        if self.scale_full_dmodel {
            (self.d_model as f64).sqrt()
        } else {
            ((self.d_model / self.heads) as f64).sqrt()
        }
    }

    /// Number of trainable scalars a model built from this config holds.
    pub fn param_count(&self) -> usize {
        match self.kind {
            ModelKind::Transformer => {
                2 * transformer::branch_param_count(self) + 2 * self.d_model * self.classes + self.classes
            }
            ModelKind::Mlp => baselines::mlp_param_count(self),
            ModelKind::Cnn => baselines::cnn_param_count(self),
        }
    }
}

/// Intermediate values of a transformer forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub amp: BranchTrace,
    pub phase: BranchTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    pe: Option<Tensor>,
}

impl Model {
    /// Builds a model with seeded initial weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        match config.kind {
            ModelKind::Transformer => {
                transformer::add_branch_params(&mut params, "amp", &config, &mut rng)?;
                transformer::add_branch_params(&mut params, "phase", &config, &mut rng)?;
                let d2 = 2 * config.d_model;
                params.add_uniform("head.W", &[d2, config.classes], d2, &mut rng)?;
                params.add_zeros("head.b", &[config.classes])?;
            }
            ModelKind::Mlp => baselines::add_mlp_params(&mut params, &config, &mut rng)?,
            ModelKind::Cnn => baselines::add_cnn_params(&mut params, &config, &mut rng)?,
        }
        let pe = Self::build_pe(&config)?;
        Ok(Self { config, params, pe })
    }

    fn build_pe(config: &ModelConfig) -> Result<Option<Tensor>, ModelError> {
        if config.kind == ModelKind::Transformer && config.positional_encoding {
            Ok(Some(sinusoidal_pe(config.window_len, config.d_model)?))
        } else {
            Ok(None)
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.num_values()
    }

    /// Turns positional encoding on or off without touching the weights.
    pub fn set_positional_encoding(&mut self, enabled: bool) -> Result<(), ModelError> {
        self.config.positional_encoding = enabled;
        self.pe = Self::build_pe(&self.config)?;
        Ok(())
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for p in self.params.iter_mut() {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    fn check_input(&self, t: &Tensor) -> Result<(), ModelError> {
        let expected = (self.config.window_len, self.config.subcarriers);
        if t.shape() != [expected.0, expected.1] {
            return Err(ModelError::InputShape {
                expected,
                found: t.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Records the forward pass in `g` and returns `[1, N]` logits.
    pub fn forward(&self, g: &mut Graph, amp: &Tensor, phase: &Tensor) -> Result<Var, ModelError> {
        Ok(self.forward_traced(g, amp, phase)?.0)
    }

    /// Like [`Model::forward`]; transformers also return their intermediates.
    pub fn forward_traced(
        &self,
        g: &mut Graph,
        amp: &Tensor,
        phase: &Tensor,
    ) -> Result<(Var, Option<ForwardTrace>), ModelError> {
        self.check_input(amp)?;
        self.check_input(phase)?;
        let cfg = &self.config;
        let store = &self.params;
        match cfg.kind {
            ModelKind::Transformer => {
                let pe = self.pe.as_ref();
                let a = transformer::branch_forward(g, store, "amp", cfg, pe, amp)?;
                let p = transformer::branch_forward(g, store, "phase", cfg, pe, phase)?;
                let fused = g.concat(&[a.pooled, p.pooled])?;
                let fused = g.reshape(fused, &[1, 2 * cfg.d_model])?;
                let w = g.param(store, store.id("head.W").expect("head.W"));
                let b = g.param(store, store.id("head.b").expect("head.b"));
                let y = g.matmul(fused, w)?;
                let y = g.add(y, b)?;
                Ok((y, Some(ForwardTrace { amp: a, phase: p })))
            }
            ModelKind::Mlp => Ok((baselines::mlp_forward(g, store, cfg, amp, phase)?, None)),
            ModelKind::Cnn => Ok((baselines::cnn_forward(g, store, cfg, amp, phase)?, None)),
        }
    }

    /// Eval-mode logits for one window.
    pub fn logits(&self, amp: &Tensor, phase: &Tensor) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let y = self.forward(&mut g, amp, phase)?;
        Ok(g.value(y).data().to_vec())
    }

    /// Index of the largest logit; ties resolve to the lowest class.
    pub fn predict(&self, amp: &Tensor, phase: &Tensor) -> Result<usize, ModelError> {
        Ok(argmax(&self.logits(amp, phase)?))
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
