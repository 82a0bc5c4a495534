//! Model and trainer configuration with validation. Both structs deserialize
//! from TOML/JSON with per-field defaults, so a run config only needs to name
//! what it changes.

use serde::{Deserialize, Serialize};

use crate::error::{GritError, Result};

/// How position information enters the input encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalMode {
    /// Frozen sinusoid table.
    FixedSinusoidal,
    /// Sinusoid-initialized but trainable.
    LearnableSinusoidalInit,
    /// Random-initialized and trainable.
    FullyLearnable,
}

/// Enables each of the four temporal statistics streams feeding group
/// membership. Disabled streams contribute a zero vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSwitches {
    pub current_complete: bool,
    pub transition_complete: bool,
    pub current_short: bool,
    pub transition_short: bool,
}

impl Default for FeatureSwitches {
    fn default() -> Self {
        FeatureSwitches {
            current_complete: true,
            transition_complete: true,
            current_short: true,
            transition_short: true,
        }
    }
}

impl FeatureSwitches {
    pub fn any(&self) -> bool {
        self.current_complete
            || self.transition_complete
            || self.current_short
            || self.transition_short
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding and hidden width.
    pub dim: usize,
    /// Maximum sequence length; longer histories are chunked.
    pub max_len: usize,
    /// Number of encoder blocks.
    pub layers: usize,
    /// Attention heads per block; must divide `dim`.
    pub heads: usize,
    /// Feed-forward inner width.
    pub ff_dim: usize,
    /// Number of latent groups.
    pub groups: usize,
    /// Fusion weight on the group path, in [0, 1].
    pub beta: f64,
    /// Membership softmax temperature.
    pub tau: f64,
    /// Decay rate of the complete window; per-step retention is 1 - value.
    pub decay_complete: f64,
    /// Decay rate of the short window.
    pub decay_short: f64,
    /// Short window width in positions.
    pub short_window: usize,
    /// Lower bound applied to windowed variances before they feed the MLPs.
    pub var_floor: f64,
    /// Dropout on embeddings, residual branches and FFN output.
    pub dropout: f64,
    /// Dropout on attention probabilities.
    pub attn_dropout: f64,
    pub positional: PositionalMode,
    pub features: FeatureSwitches,
    /// Adds a GELU hidden layer (width `dim`) inside the statistics and
    /// membership MLPs, which are plain affine maps by default.
    pub mlp_hidden: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            max_len: 50,
            layers: 2,
            heads: 4,
            ff_dim: 256,
            groups: 64,
            beta: 0.3,
            tau: 2.0,
            decay_complete: 0.01,
            decay_short: 0.05,
            short_window: 5,
            var_floor: 1e-6,
            dropout: 0.4,
            attn_dropout: 0.1,
            positional: PositionalMode::FullyLearnable,
            features: FeatureSwitches::default(),
            mlp_hidden: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(GritError::Config(msg));
        if self.dim == 0 {
            return fail("dim must be positive".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("heads ({}) must divide dim ({})", self.heads, self.dim));
        }
        if self.max_len == 0 {
            return fail("max_len must be positive".into());
        }
        if self.layers == 0 {
            return fail("layers must be positive".into());
        }
        if self.ff_dim < self.dim {
            return fail(format!("ff_dim ({}) must be >= dim ({})", self.ff_dim, self.dim));
        }
        if self.groups == 0 {
            return fail("groups must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.beta) || !self.beta.is_finite() {
            return fail(format!("beta ({}) must lie in [0, 1]", self.beta));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau ({}) must be positive", self.tau));
        }
        for (name, a) in [("decay_complete", self.decay_complete), ("decay_short", self.decay_short)] {
            if !(a > 0.0 && a < 1.0) {
                return fail(format!("{name} ({a}) must lie in (0, 1)"));
            }
        }
        if self.short_window == 0 {
            return fail("short_window must be >= 1".into());
        }
        if !(self.var_floor > 0.0 && self.var_floor.is_finite()) {
            return fail(format!("var_floor ({}) must be positive", self.var_floor));
        }
        for (name, r) in [("dropout", self.dropout), ("attn_dropout", self.attn_dropout)] {
            if !(0.0..1.0).contains(&r) {
                return fail(format!("{name} ({r}) must lie in [0, 1)"));
            }
        }
        if self.positional != PositionalMode::FullyLearnable && self.dim % 2 != 0 {
            return fail("sinusoidal position tables need an even dim".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Optional global gradient-norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 0.01,
            batch_size: 256,
            max_epochs: 500,
            patience: 10,
            seed: 42,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(GritError::Config(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate ({}) must be positive", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay ({}) must be >= 0", self.weight_decay));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be positive".into());
        }
        if self.patience == 0 {
            return fail("patience must be >= 1".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return fail(format!("grad_clip ({c}) must be positive"));
            }
        }
        Ok(())
    }
}
