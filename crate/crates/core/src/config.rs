use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which task directions a model carries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Dual,
    QaOnly,
    QgOnly,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Dual => "dual",
            Mode::QaOnly => "qa-only",
            Mode::QgOnly => "qg-only",
        }
    }

    pub fn has(self, task: Task) -> bool {
        match self {
            Mode::Dual => true,
            Mode::QaOnly => task == Task::Qa,
            Mode::QgOnly => task == Task::Qg,
        }
    }

    pub fn tasks(self) -> &'static [Task] {
        match self {
            Mode::Dual => &[Task::Qa, Task::Qg],
            Mode::QaOnly => &[Task::Qa],
            Mode::QgOnly => &[Task::Qg],
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" => Ok(Mode::Dual),
            "qa-only" => Ok(Mode::QaOnly),
            "qg-only" => Ok(Mode::QgOnly),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// Question answering decodes the answer; question generation decodes the
/// question. Everything else about the two directions is mirrored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Qa,
    Qg,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Qa => "qa",
            Task::Qg => "qg",
        }
    }

    pub fn dual(self) -> Task {
        match self {
            Task::Qa => Task::Qg,
            Task::Qg => Task::Qa,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qa" => Ok(Task::Qa),
            "qg" => Ok(Task::Qg),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// Every dimension, hyperparameter and ablation switch of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_word: usize,
    pub d_char: usize,
    /// Width of the highway output.
    pub d_embed: usize,
    pub d_model: usize,
    /// Total width of the self-attention projections across heads.
    pub d_attn: Option<usize>,
    /// Projection width of the bilinear fold-in scores; defaults to the
    /// encoder output width.
    pub d_fold: Option<usize>,
    pub heads: usize,
    pub lstm_layers: usize,
    /// Add each stacked LSTM layer's input to its output.
    pub lstm_residual: bool,
    pub ffn_hidden: Option<usize>,
    pub gen_hidden: usize,
    /// Use per-feature highway biases instead of scalars.
    pub vector_highway_bias: bool,
    pub layer_norm_eps: f64,

    pub kappa: f64,
    pub qa_weight: f64,
    pub qg_weight: f64,
    pub clip: f64,
    pub lr_max: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub keep_prob: f64,
    pub decode_cap: usize,
    pub min_count: usize,

    pub mode: Mode,
    pub no_copy: bool,
    pub no_context_attention: bool,
    pub encoder_no_lstm: bool,
    pub encoder_no_selfattn: bool,
    pub unshare_qa_encoders: bool,
    pub unshare_context_encoder: bool,
    pub unshare_output_projection: bool,
    /// Use one (U, V) pair per fold-in step for both tasks.
    pub share_attention: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_word: 256,
            d_char: 200,
            d_embed: 300,
            d_model: 300,
            d_attn: None,
            d_fold: None,
            heads: 4,
            lstm_layers: 3,
            lstm_residual: false,
            ffn_hidden: None,
            gen_hidden: 1024,
            vector_highway_bias: false,
            layer_norm_eps: 1e-6,
            kappa: 1.0,
            qa_weight: 1.0,
            qg_weight: 1.0,
            clip: 5.0,
            lr_max: 0.001,
            warmup_steps: 1000,
            batch_size: 16,
            keep_prob: 0.9,
            decode_cap: 100,
            min_count: 5,
            mode: Mode::Dual,
            no_copy: false,
            no_context_attention: false,
            encoder_no_lstm: false,
            encoder_no_selfattn: false,
            unshare_qa_encoders: false,
            unshare_context_encoder: false,
            unshare_output_projection: false,
            share_attention: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// A small configuration suited to tests and desk-scale runs.
    pub fn tiny() -> Self {
        ModelConfig {
            d_word: 16,
            d_char: 8,
            d_embed: 16,
            d_model: 16,
            heads: 2,
            lstm_layers: 1,
            keep_prob: 1.0,
            ..ModelConfig::default()
        }
    }

    pub fn d_attn(&self) -> usize {
        self.d_attn.unwrap_or(self.d_model)
    }

    pub fn blocks(&self) -> usize {
        1 + usize::from(!self.encoder_no_lstm) + usize::from(!self.encoder_no_selfattn)
    }

    /// Width of an encoder output: one `d_model` slab per block.
    pub fn d_enc(&self) -> usize {
        self.blocks() * self.d_model
    }

    pub fn d_fold(&self) -> usize {
        self.d_fold.unwrap_or_else(|| self.d_enc())
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_hidden.unwrap_or_else(|| (4 * self.d_model).min(512))
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_word", self.d_word),
            ("d_char", self.d_char),
            ("d_embed", self.d_embed),
            ("d_model", self.d_model),
            ("d_attn", self.d_attn()),
            ("d_fold", self.d_fold()),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden()),
            ("gen_hidden", self.gen_hidden),
            ("batch_size", self.batch_size),
            ("decode_cap", self.decode_cap),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.encoder_no_lstm && self.lstm_layers == 0 {
            return Err(Error::Config("lstm_layers must be positive".into()));
        }
        if self.d_model % self.heads != 0 || self.d_attn() % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model ({}) and d_attn ({}) must be divisible by heads ({})",
                self.d_model,
                self.d_attn(),
                self.heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even to split across LSTM directions".into()));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::Config(format!("keep_prob {} not in (0, 1]", self.keep_prob)));
        }
        if self.kappa < 0.0 || self.qa_weight < 0.0 || self.qg_weight < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.clip <= 0.0 || self.lr_max < 0.0 || self.layer_norm_eps <= 0.0 {
            return Err(Error::Config("clip and layer_norm_eps must be positive, lr_max nonnegative".into()));
        }
        Ok(())
    }

    /// Settings that cannot affect the chosen mode. Returned so callers
    /// can surface them; they are not errors.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.mode != Mode::Dual {
            if self.unshare_qa_encoders {
                out.push("unshare_qa_encoders has no effect in a single-task mode".to_string());
            }
            if self.unshare_context_encoder {
                out.push("unshare_context_encoder has no effect in a single-task mode".to_string());
            }
            if self.unshare_output_projection {
                out.push("unshare_output_projection has no effect in a single-task mode".to_string());
            }
            if self.share_attention {
                out.push("share_attention has no effect in a single-task mode".to_string());
            }
        }
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
