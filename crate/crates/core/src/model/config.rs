use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Initial content token for the first cross-attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Phi0Source {
    /// Mean-pooled video embedding.
    #[default]
    Video,
    Zero,
    /// Mean-pooled track embedding.
    MusicMean,
    /// Video-conditioned attention-pooled track embedding.
    MusicXpool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MatchingMode {
    /// Sum of the mean-pooled and attention-pooled cosine similarities.
    #[default]
    Both,
    MeanOnly,
    XpoolOnly,
    /// Cosine against the sum of the two track embeddings.
    FeatureAdd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// One contrastive term per similarity, summed.
    #[default]
    Joint,
    /// One contrastive term on the summed similarity.
    Single,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Enhancement {
    #[default]
    Sa,
    None,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictMode {
    #[default]
    CenterWidth,
    /// Predict the centre only; the width is the query video's duration.
    CenterOnly,
}

/// Architecture and ablation switches. `Default` is the full model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub video_dim: usize,
    pub music_dim: usize,
    pub enc_sa_layers: usize,
    pub fusion_sa_layers: usize,
    pub decoder_ca_layers: usize,
    pub query_tokens: usize,
    pub dropout: f64,
    pub phi0_source: Phi0Source,
    pub matching_mode: MatchingMode,
    pub loss_mode: LossMode,
    pub enhancement: Enhancement,
    pub predict: PredictMode,
    /// Supervise the moment head after every decoder layer, not only the last.
    pub aux_loss: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 256,
            heads: 8,
            video_dim: 512,
            music_dim: 768,
            enc_sa_layers: 1,
            fusion_sa_layers: 2,
            decoder_ca_layers: 6,
            query_tokens: 1,
            dropout: 0.1,
            phi0_source: Phi0Source::Video,
            matching_mode: MatchingMode::Both,
            loss_mode: LossMode::Joint,
            enhancement: Enhancement::Sa,
            predict: PredictMode::CenterWidth,
            aux_loss: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return fail(format!("d={} must be divisible by heads={}", self.d, self.heads));
        }
        if !self.d.is_multiple_of(2) {
            return fail(format!("d={} must be even for sinusoidal encoding", self.d));
        }
        if self.decoder_ca_layers == 0 {
            return fail("decoder_ca_layers must be >= 1".into());
        }
        if self.query_tokens == 0 {
            return fail("query_tokens must be >= 1".into());
        }
        if self.video_dim == 0 || self.music_dim == 0 {
            return fail("feature widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.loss_mode == LossMode::Single && self.matching_mode != MatchingMode::Both {
            return fail("loss_mode=single only applies to matching_mode=both".into());
        }
        if self.phi0_source == Phi0Source::MusicXpool && self.matching_mode == MatchingMode::MeanOnly {
            return fail("phi0_source=music_xpool needs the attention pool".into());
        }
        Ok(())
    }

    /// Whether the attention-pooling branch has parameters.
    pub fn uses_xpool(&self) -> bool {
        self.matching_mode != MatchingMode::MeanOnly
    }
}
