//! Model configuration: variants, their default flags, and the vocabulary.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Token id as stored in corpora and passed to the models.
pub type Token = u32;

/// Vocabulary size and the ids of the special tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocab {
    pub size: usize,
    #[serde(default = "default_pad")]
    pub pad: Token,
    /// Separator placed between source and target (`⇒`).
    #[serde(default = "default_sep")]
    pub sep: Token,
    #[serde(default = "default_eos")]
    pub eos: Token,
}

fn default_pad() -> Token {
    0
}
fn default_sep() -> Token {
    1
}
fn default_eos() -> Token {
    2
}

/// Number of reserved ids at the bottom of the default vocabulary.
pub const NUM_SPECIALS: usize = 3;

impl Vocab {
    /// Vocabulary with the default specials `pad = 0`, `sep = 1`, `eos = 2`.
    pub fn new(size: usize) -> Result<Self> {
        let v = Self { size, pad: default_pad(), sep: default_sep(), eos: default_eos() };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let specials = [self.pad, self.sep, self.eos];
        if specials.iter().any(|&t| t as usize >= self.size) {
            return Err(LabError::Config(format!("special token ids {specials:?} must be < vocab size {}", self.size)));
        }
        if self.pad == self.sep || self.pad == self.eos || self.sep == self.eos {
            return Err(LabError::Config(format!("special token ids {specials:?} must be distinct")));
        }
        Ok(())
    }

    pub fn is_special(&self, t: Token) -> bool {
        t == self.pad || t == self.sep || t == self.eos
    }

    pub fn check(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.size) {
            Some(&token) => Err(LabError::UnknownToken { token, vocab: self.size }),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    ED,
    LM,
    #[serde(rename = "LM_SPE")]
    LmSpe,
    #[serde(rename = "LM_LE")]
    LmLe,
    #[serde(rename = "LM_PA")]
    LmPa,
    PreLM,
    RED,
    PALM,
}

/// Which forward pass a variant runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// One stack over `s ⧺ [sep] ⧺ t` (LM, its ablations, PreLM, PALM).
    DecoderOnly,
    /// Encoder over `s`, decoder over `[sep] ⧺ t` attending to `[encoder layer l; decoder layer l]`.
    Regularized,
    /// Encoder over `s`, decoder over `[sep] ⧺ t` with cross attention to the final encoder output.
    EncoderDecoder,
}

impl Variant {
    pub const ALL: [Variant; 8] =
        [Variant::ED, Variant::LM, Variant::LmSpe, Variant::LmLe, Variant::LmPa, Variant::PreLM, Variant::RED, Variant::PALM];

    pub fn architecture(self) -> Architecture {
        match self {
            Variant::ED => Architecture::EncoderDecoder,
            Variant::RED => Architecture::Regularized,
            _ => Architecture::DecoderOnly,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::ED => "ED",
            Variant::LM => "LM",
            Variant::LmSpe => "LM_SPE",
            Variant::LmLe => "LM_LE",
            Variant::LmPa => "LM_PA",
            Variant::PreLM => "PreLM",
            Variant::RED => "RED",
            Variant::PALM => "PALM",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| LabError::Config(format!("unknown variant {s}")))
    }
}

/// Consecutive positions across source and target, or positions restarting at the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PositionalMode {
    CPE,
    SPE,
}

/// Attention pattern inside the source block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceMask {
    Causal,
    Bidirectional,
}

/// Which next-token predictions enter the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    /// Source positions (and the separator prediction) plus target positions.
    FullSequence,
    TargetOnly,
}

/// Fully resolved model configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub layers: usize,
    pub d: usize,
    pub ffn_width: usize,
    pub heads: usize,
    pub dropout: f64,
    pub vocab: Vocab,
    pub max_positions: usize,
    pub positional_mode: PositionalMode,
    pub language_embedding: bool,
    pub source_mask: SourceMask,
    pub loss_scope: LossScope,
    pub share_encoder_decoder_params: bool,
    pub partial_attention: bool,
    /// Output projection reuses the (decoder) word-embedding table.
    pub tie_output: bool,
}

impl ModelConfig {
    /// Configuration with the variant's default flags and `layers = 6`, `heads = 1`,
    /// `ffn_width = 4d`, `dropout = 0.1`, `max_positions = 256`.
    pub fn new(variant: Variant, d: usize, vocab: Vocab) -> Self {
        let mut c = ModelConfig {
            variant,
            layers: 6,
            d,
            ffn_width: 4 * d,
            heads: 1,
            dropout: 0.1,
            vocab,
            max_positions: 256,
            positional_mode: PositionalMode::CPE,
            language_embedding: false,
            source_mask: SourceMask::Causal,
            loss_scope: LossScope::FullSequence,
            share_encoder_decoder_params: false,
            partial_attention: false,
            tie_output: true,
        };
        match variant {
            Variant::LM => {}
            Variant::LmSpe => c.positional_mode = PositionalMode::SPE,
            Variant::LmLe => c.language_embedding = true,
            Variant::LmPa => c.partial_attention = true,
            Variant::PreLM => c.source_mask = SourceMask::Bidirectional,
            Variant::PALM => {
                c.positional_mode = PositionalMode::SPE;
                c.source_mask = SourceMask::Bidirectional;
                c.language_embedding = true;
                c.partial_attention = true;
            }
            Variant::RED => c.share_encoder_decoder_params = true,
            Variant::ED => {
                c.positional_mode = PositionalMode::SPE;
                c.source_mask = SourceMask::Bidirectional;
                c.loss_scope = LossScope::TargetOnly;
            }
        }
        c
    }

    pub fn with_layers(mut self, layers: usize) -> Self {
        self.layers = layers;
        self
    }

    pub fn with_dropout(mut self, dropout: f64) -> Self {
        self.dropout = dropout;
        self
    }

    pub fn architecture(&self) -> Architecture {
        self.variant.architecture()
    }

    pub fn head_width(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        let fail = |msg: String| Err(LabError::Config(msg));
        if self.layers == 0 {
            return fail("layers must be >= 1".into());
        }
        if self.d == 0 || self.ffn_width == 0 {
            return fail("d and ffn_width must be positive".into());
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return fail(format!("heads = {} must divide d = {}", self.heads, self.d));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        if self.max_positions < 2 {
            return fail("max_positions must be >= 2".into());
        }
        match self.architecture() {
            Architecture::Regularized if !self.share_encoder_decoder_params => {
                fail("RED requires share_encoder_decoder_params".into())
            }
            Architecture::Regularized | Architecture::EncoderDecoder if self.partial_attention => {
                fail("partial attention is only defined for decoder-only variants".into())
            }
            _ => Ok(()),
        }
    }
}

/// Partially specified model configuration as written in experiment files.
///
/// Missing fields take the defaults of the chosen variant.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub variant: Option<Variant>,
    pub layers: Option<usize>,
    pub d: Option<usize>,
    pub ffn_width: Option<usize>,
    pub heads: Option<usize>,
    pub dropout: Option<f64>,
    pub vocab: Option<Vocab>,
    pub max_positions: Option<usize>,
    pub positional_mode: Option<PositionalMode>,
    pub language_embedding: Option<bool>,
    pub source_mask: Option<SourceMask>,
    pub loss_scope: Option<LossScope>,
    pub share_encoder_decoder_params: Option<bool>,
    pub partial_attention: Option<bool>,
    pub tie_output: Option<bool>,
}

impl ModelSpec {
    /// Fills unset fields from the variant defaults; `vocab` falls back to `default_vocab`.
    pub fn resolve(&self, default_vocab: Option<Vocab>) -> Result<ModelConfig> {
        let variant = self.variant.ok_or_else(|| LabError::Config("model.variant is required".into()))?;
        let d = self.d.ok_or_else(|| LabError::Config("model.d is required".into()))?;
        let vocab = self
            .vocab
            .or(default_vocab)
            .ok_or_else(|| LabError::Config("model.vocab is required".into()))?;
        let mut c = ModelConfig::new(variant, d, vocab);
        macro_rules! apply {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        apply!(
            layers,
            ffn_width,
            heads,
            dropout,
            max_positions,
            positional_mode,
            language_embedding,
            source_mask,
            loss_scope,
            share_encoder_decoder_params,
            partial_attention,
            tie_output
        );
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::new(11).unwrap()
    }

    #[test]
    fn vocab_rules() {
        assert!(Vocab::new(3).is_ok());
        assert!(Vocab::new(2).is_err());
        let bad = Vocab { size: 10, pad: 1, sep: 1, eos: 2 };
        assert!(bad.validate().is_err());
        assert!(matches!(vocab().check(&[3, 11]), Err(LabError::UnknownToken { token: 11, vocab: 11 })));
    }

    #[test]
    fn variant_defaults() {
        let lm = ModelConfig::new(Variant::LM, 8, vocab());
        assert_eq!(
            (lm.positional_mode, lm.source_mask, lm.loss_scope, lm.language_embedding, lm.partial_attention),
            (PositionalMode::CPE, SourceMask::Causal, LossScope::FullSequence, false, false)
        );
        let palm = ModelConfig::new(Variant::PALM, 8, vocab());
        assert_eq!(
            (palm.positional_mode, palm.source_mask, palm.loss_scope, palm.language_embedding, palm.partial_attention),
            (PositionalMode::SPE, SourceMask::Bidirectional, LossScope::FullSequence, true, true)
        );
        let red = ModelConfig::new(Variant::RED, 8, vocab());
        assert!(red.share_encoder_decoder_params && red.positional_mode == PositionalMode::CPE);
        let ed = ModelConfig::new(Variant::ED, 8, vocab());
        assert_eq!((ed.positional_mode, ed.loss_scope), (PositionalMode::SPE, LossScope::TargetOnly));
        assert!(!ed.share_encoder_decoder_params);
        assert_eq!(ModelConfig::new(Variant::PreLM, 8, vocab()).source_mask, SourceMask::Bidirectional);
        for v in Variant::ALL {
            ModelConfig::new(v, 8, vocab()).validate().unwrap();
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn validation_errors() {
        let mut c = ModelConfig::new(Variant::LM, 8, vocab());
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut red = ModelConfig::new(Variant::RED, 8, vocab());
        red.share_encoder_decoder_params = false;
        assert!(red.validate().is_err());
        let mut ed = ModelConfig::new(Variant::ED, 8, vocab());
        ed.partial_attention = true;
        assert!(ed.validate().is_err());
    }

    #[test]
    fn spec_resolution_and_unknown_keys() {
        let spec: ModelSpec =
            serde_json::from_str(r#"{"variant": "PALM", "d": 16, "layers": 2, "loss_scope": "target_only"}"#).unwrap();
        let c = spec.resolve(Some(vocab())).unwrap();
        assert_eq!((c.layers, c.d, c.loss_scope), (2, 16, LossScope::TargetOnly));
        assert!(c.partial_attention);
        assert!(serde_json::from_str::<ModelSpec>(r#"{"variant": "LM", "width": 3}"#).is_err());
        assert!(ModelSpec::default().resolve(None).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let c = ModelConfig::new(Variant::LmPa, 8, vocab());
        let back: ModelConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
