use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::corpus::{ChunkScheme, Vocabulary};
use crate::error::{Error, Result};
use crate::layers::WindowSpec;
use crate::model::{Direction, ModelSpec, Variant};

/// Dev metric used to pick the kept snapshot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectBy {
    Accuracy,
    F1,
}

impl FromStr for SelectBy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(SelectBy::Accuracy),
            "f1" => Ok(SelectBy::F1),
            _ => Err(Error::config(format!("select_by must be accuracy or f1, got {s:?}"))),
        }
    }
}

impl fmt::Display for SelectBy {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(match self {
            SelectBy::Accuracy => "accuracy",
            SelectBy::F1 => "f1",
        })
    }
}

/// How often parameters move.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    /// After every position.
    Position,
    /// Once per sentence, with the mean of its per-position gradients.
    Sentence,
}

impl FromStr for Granularity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "position" => Ok(Granularity::Position),
            "sentence" => Ok(Granularity::Sentence),
            _ => Err(Error::config(format!("update must be position or sentence, got {s:?}"))),
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(match self {
            Granularity::Position => "position",
            Granularity::Sentence => "sentence",
        })
    }
}

macro_rules! config {
    ($($(#[$doc:meta])* $name:ident: $ty:ty = $default:expr,)*) => {
        /// Every training hyperparameter. Keys of the `key=value` format are
        /// the field names.
        #[derive(Clone, Debug, PartialEq)]
        pub struct TrainConfig {
            $($(#[$doc])* pub $name: $ty,)*
        }

        impl Default for TrainConfig {
            fn default() -> Self {
                TrainConfig { $($name: $default,)* }
            }
        }

        impl TrainConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            /// Sets one field from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($name) => {
                        self.$name = value.trim().parse::<$ty>().map_err(|e| {
                            Error::config(format!("bad value {value:?} for {key}: {e}"))
                        })?;
                    })*
                    _ => return Err(Error::config(format!("unknown config key {key:?}"))),
                }
                Ok(())
            }

            pub fn to_key_values(&self) -> String {
                let mut s = String::new();
                $(s.push_str(&format!("{}={}\n", stringify!($name), self.$name));)*
                s
            }
        }
    };
}

config! {
    epochs_fwd_bwd: usize = 30,
    epochs_bidir: usize = 8,
    epochs_nnlm_word: usize = 30,
    epochs_nnlm_label: usize = 20,
    lr0: f64 = 0.5,
    momentum: f64 = 0.5,
    lambda_l2: f64 = 0.01,
    lambda_l2_bidir: f64 = 3e-4,
    /// Decay embedding tables as well as weight matrices.
    l2_embeddings: bool = false,
    dropout_hidden: f64 = 0.5,
    dropout_embed: f64 = 0.15,
    d_w: usize = 3,
    d_l: usize = 5,
    d_c: usize = 1,
    embed_dim: usize = 200,
    hidden: usize = 200,
    /// Hidden size when classes and characters are both used.
    hidden_all_inputs: usize = 256,
    /// Per-group layer size of the deep variant.
    first_level: usize = 200,
    char_embed: usize = 30,
    conv_size: usize = 80,
    use_classes: bool = false,
    use_chars: bool = false,
    /// Feed previous labels; false gives the label-blind ablation.
    label_context: bool = true,
    gru_words_only: bool = false,
    nnlm_context: usize = 4,
    nnlm_hidden: usize = 200,
    /// Per-token updates make the NNLM unstable at the tagger rate.
    nnlm_lr0: f64 = 0.05,
    update: Granularity = Granularity::Sentence,
    select_by: SelectBy = SelectBy::Accuracy,
    scheme: ChunkScheme = ChunkScheme::Suffix,
    /// Probability of feeding the model's own prediction instead of the gold label.
    scheduled_sampling: f64 = 0.0,
    /// Gradient norm cap; 0 disables clipping.
    max_grad_norm: f64 = 0.0,
    freeze_embeddings_bidir: bool = false,
    lowercase: bool = true,
    min_count: usize = 1,
    seed: u64 = 1,
}

impl TrainConfig {
    /// Window 7, convolution 80, embedding dropout 0.15. Same as `default()`.
    pub fn media_like() -> Self {
        TrainConfig::default()
    }

    /// Window 11, convolution 50, embedding dropout 0.2.
    pub fn atis_like() -> Self {
        TrainConfig {
            d_w: 5,
            conv_size: 50,
            dropout_embed: 0.2,
            ..TrainConfig::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "media-like" => Ok(Self::media_like()),
            "atis-like" => Ok(Self::atis_like()),
            _ => Err(Error::config(format!("unknown preset {name:?} (media-like, atis-like)"))),
        }
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_key_values(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply_key_values(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_key_values(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_key_values())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must lie in [0, 1), got {v}")))
            }
        };
        unit("dropout_hidden", self.dropout_hidden)?;
        unit("dropout_embed", self.dropout_embed)?;
        unit("momentum", self.momentum)?;
        if !(0.0..=1.0).contains(&self.scheduled_sampling) {
            return Err(Error::config("scheduled_sampling must lie in [0, 1]"));
        }
        for (name, v) in [
            ("lr0", self.lr0),
            ("nnlm_lr0", self.nnlm_lr0),
            ("lambda_l2", self.lambda_l2),
            ("lambda_l2_bidir", self.lambda_l2_bidir),
            ("max_grad_norm", self.max_grad_norm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        for (name, v) in [
            ("epochs_fwd_bwd", self.epochs_fwd_bwd),
            ("epochs_bidir", self.epochs_bidir),
            ("epochs_nnlm_word", self.epochs_nnlm_word),
            ("epochs_nnlm_label", self.epochs_nnlm_label),
            ("d_l", self.d_l),
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("hidden_all_inputs", self.hidden_all_inputs),
            ("first_level", self.first_level),
            ("char_embed", self.char_embed),
            ("conv_size", self.conv_size),
            ("nnlm_context", self.nnlm_context),
            ("nnlm_hidden", self.nnlm_hidden),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn window(&self) -> Result<WindowSpec> {
        WindowSpec::new(self.d_w, self.d_l, self.d_c)
    }

    /// Hidden size actually used: the larger one when every input is on.
    pub fn effective_hidden(&self) -> usize {
        if self.use_classes && self.use_chars {
            self.hidden_all_inputs
        } else {
            self.hidden
        }
    }

    pub fn model_spec(&self, vocab: &Vocabulary, variant: Variant, direction: Direction) -> Result<ModelSpec> {
        self.validate()?;
        let mut spec = ModelSpec::for_vocab(vocab, variant, direction, self.window()?, self.embed_dim);
        spec.char_dim = self.char_embed;
        spec.conv_size = self.conv_size;
        spec.hidden = self.effective_hidden();
        spec.first_level = self.first_level;
        spec.use_classes = self.use_classes;
        spec.use_chars = self.use_chars;
        spec.label_context = self.label_context;
        spec.gru_words_only = self.gru_words_only;
        Ok(spec)
    }

    /// NNLM settings for the word (`labels == false`) or label language model.
    /// Its embedding size matches the tagger so the table drops straight in.
    pub fn nnlm_config(&self, labels: bool) -> crate::pretrain::NnlmConfig {
        crate::pretrain::NnlmConfig {
            context: self.nnlm_context,
            dim: self.embed_dim,
            hidden: self.nnlm_hidden,
            epochs: if labels { self.epochs_nnlm_label } else { self.epochs_nnlm_word },
            lr0: self.nnlm_lr0,
            momentum: self.momentum,
            lambda: 0.0,
        }
    }

    pub fn vocab_options(&self) -> crate::corpus::VocabOptions {
        crate::corpus::VocabOptions {
            min_count: self.min_count,
            lowercase: self.lowercase,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_value_round_trip() {
        let mut c = TrainConfig::atis_like();
        c.select_by = SelectBy::F1;
        c.scheme = ChunkScheme::Plain;
        c.lambda_l2 = 1.0 / 3.0;
        let back = TrainConfig::from_key_values(&c.to_key_values()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.to_key_values().lines().count(), TrainConfig::KEYS.len());
    }

    #[test]
    fn overrides_and_errors() {
        let c = TrainConfig::from_key_values("# comment\n\nhidden = 64\nselect_by=f1\n").unwrap();
        assert_eq!(c.hidden, 64);
        assert_eq!(c.select_by, SelectBy::F1);
        assert!(TrainConfig::from_key_values("hiden=3").is_err());
        assert!(TrainConfig::from_key_values("hidden=abc").is_err());
        assert!(TrainConfig::from_key_values("dropout_hidden=1.0").is_err());
        assert!(TrainConfig::from_key_values("momentum=-0.1").is_err());
        assert!(TrainConfig::from_key_values("d_l=0").is_err());
        assert!(TrainConfig::from_key_values("no equals sign").is_err());
        assert!(TrainConfig::preset("snips").is_err());
    }

    #[test]
    fn effective_hidden_with_all_inputs() {
        let mut c = TrainConfig::default();
        assert_eq!(c.effective_hidden(), 200);
        c.use_classes = true;
        c.use_chars = true;
        assert_eq!(c.effective_hidden(), 256);
    }
}
