use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphVariant {
    /// Three-layer Mish MLP on `e_ij ++ e_ji`, then a sigmoid.
    MlpSigmoid,
    /// Single-head GATv2 scoring `a . LeakyReLU(W [p_ij])`, then a sigmoid.
    Gatv2,
}

/// What the decoder heads predict.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Per-step state differences; the rollout integrates them.
    Delta,
    /// The next state itself.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub state_dim: usize,
    pub n_agents: usize,
    /// Width of the state MLP's hidden layer.
    pub state_mlp_hidden: usize,
    /// GRU input width (state MLP output).
    pub gru_input: usize,
    pub hidden_dim: usize,
    /// Key/query/value width, `heads * head_dim`.
    pub embed_dim: usize,
    pub heads: usize,
    pub graph_mlp_hidden: Vec<usize>,
    pub gatv2_hidden: usize,
    pub decoder_hidden: usize,
    pub use_pa: bool,
    pub graph_variant: GraphVariant,
    pub t_enc: usize,
    pub t_dec: usize,
    pub target_mode: TargetMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            state_dim: 4,
            n_agents: 5,
            state_mlp_hidden: 64,
            gru_input: 128,
            hidden_dim: 256,
            embed_dim: 128,
            heads: 4,
            graph_mlp_hidden: vec![32, 16],
            gatv2_hidden: 32,
            decoder_hidden: 256,
            use_pa: true,
            graph_variant: GraphVariant::MlpSigmoid,
            t_enc: 50,
            t_dec: 50,
            target_mode: TargetMode::Delta,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads.max(1)
    }

    /// Width of one directed pair representation fed to the graph extractor.
    pub fn pair_dim(&self) -> usize {
        if self.use_pa {
            2 * self.embed_dim
        } else {
            2 * self.hidden_dim
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("state_dim", self.state_dim),
            ("state_mlp_hidden", self.state_mlp_hidden),
            ("gru_input", self.gru_input),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("gatv2_hidden", self.gatv2_hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("t_enc", self.t_enc),
            ("t_dec", self.t_dec),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(format!("{name} must be positive"));
            }
        }
        if self.n_agents < 2 {
            return Err(format!("need at least 2 agents, got {}", self.n_agents));
        }
        if self.head_dim() * self.heads != self.embed_dim {
            return Err(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.graph_mlp_hidden.contains(&0) {
            return Err("graph MLP widths must be positive".into());
        }
        Ok(())
    }
}
