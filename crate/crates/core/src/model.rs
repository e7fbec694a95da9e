//! The full speech-text model: text embedding and encoder, convolutional
//! front end and speech encoder, fusion module and pre-training heads.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spectra_numerics::{Float, Graph, ParamId, ParamStore, Var};

use crate::encoders::{EncoderConfig, FusedRepresentation, Fusion, SpeechEncoder, TextEncoder};
use crate::error::{Result, SpectraError};
use crate::nn::Init;
use crate::objectives::PretrainHeads;
use crate::speech::{
    apply_mask_in_graph, assemble_speech_sequence, plan_spans, FeatureProjection, FrontendConfig, SpanMaskConfig,
    SpeechFrontend, SpeechMaskPlan,
};
use crate::text::{TextEmbedding, TokenizedInput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub frontend: FrontendConfig,
    pub text: EncoderConfig,
    pub speech: EncoderConfig,
    /// Whether the fusion layer has a feed-forward block.
    pub fusion_ffn: bool,
    pub max_text_len: usize,
    /// TPP length limit in seconds.
    pub max_speech_seconds: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frontend: FrontendConfig::desk(),
            text: EncoderConfig::desk(),
            speech: EncoderConfig::desk(),
            fusion_ffn: true,
            max_text_len: 256,
            max_speech_seconds: 10.0,
        }
    }
}

impl ModelConfig {
    pub fn paper_scale() -> Self {
        ModelConfig {
            frontend: FrontendConfig::paper_scale(),
            text: EncoderConfig::paper_scale(),
            speech: EncoderConfig::paper_scale(),
            fusion_ffn: true,
            max_text_len: 512,
            max_speech_seconds: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.text.validate()?;
        self.speech.validate()?;
        if self.text.d_h != self.speech.d_h {
            return Err(SpectraError::Config(format!(
                "text d_h {} and speech d_h {} must match for fusion",
                self.text.d_h, self.speech.d_h
            )));
        }
        if self.max_text_len < 4 {
            return Err(SpectraError::Config("max_text_len must be at least 4".into()));
        }
        if !(self.max_speech_seconds > 0.0) {
            return Err(SpectraError::Config("max_speech_seconds must be positive".into()));
        }
        Ok(())
    }

    pub fn d_h(&self) -> usize {
        self.text.d_h
    }
}

#[derive(Clone, Debug)]
pub struct Spectra {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub embedding: TextEmbedding,
    pub text_encoder: TextEncoder,
    pub frontend: SpeechFrontend,
    pub projection: FeatureProjection,
    pub cls: ParamId,
    pub sep: ParamId,
    pub speech_encoder: SpeechEncoder,
    pub fusion: Fusion,
    pub heads: PretrainHeads,
}

/// Speech inputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SpeechInput<'a> {
    pub prev: &'a [f32],
    pub cur: &'a [f32],
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub fused: FusedRepresentation,
    /// Unmasked extractor outputs of the two turns.
    pub features_prev: Var,
    pub features_cur: Var,
    /// Frame masks applied before projection (all unmasked when masking is
    /// off).
    pub mask_prev: SpeechMaskPlan,
    pub mask_cur: SpeechMaskPlan,
}

impl Spectra {
    /// Builds the model and its parameters, all drawn from `seed`.
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<(Self, ParamStore<f64>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);
        let d = config.d_h();
        let embedding = TextEmbedding::new(&mut init, vocab_size, config.max_text_len, d);
        let text_encoder = TextEncoder::new(&mut init, &config.text, config.max_text_len);
        let frontend = SpeechFrontend::new(&mut init, config.frontend.clone());
        let feature_dim = config.frontend.feature_dim();
        let projection = FeatureProjection::new(&mut init, feature_dim, d);
        let cls = init.normal("speech/cls", &[1, d], 0.02);
        let sep = init.normal("speech/sep", &[1, d], 0.02);
        let speech_encoder = SpeechEncoder::new(&mut init, &config.speech);
        let fusion = Fusion::new(&mut init, &config.text, config.fusion_ffn);
        let heads = PretrainHeads::new(&mut init, d, vocab_size, feature_dim, config.max_speech_seconds);
        let model = Spectra {
            config,
            vocab_size,
            embedding,
            text_encoder,
            frontend,
            projection,
            cls,
            sep,
            speech_encoder,
            fusion,
            heads,
        };
        Ok((model, store))
    }

    /// Runs the whole network on one sample. `token_ids` are the (possibly
    /// masked) ids laid out as `text`. With `speech_masking`, frame masks
    /// are drawn from `rng` for the previous then the current turn and
    /// applied between extractor and projection; `rng` also drives dropout.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        text: &TokenizedInput,
        token_ids: &[usize],
        speech: SpeechInput<'_>,
        speech_masking: Option<&SpanMaskConfig>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput> {
        let x = self.embedding.embed(g, store, text, token_ids)?;
        let h_text = self.text_encoder.encode_text(g, store, x, &vec![true; token_ids.len()], rng.as_deref_mut())?;

        let features_prev = self.frontend.extract_features(g, store, speech.prev)?;
        let features_cur = self.frontend.extract_features(g, store, speech.cur)?;
        let (m_prev, m_cur) = (g.shape(features_prev)[0], g.shape(features_cur)[0]);
        let (mask_prev, mask_cur) = match (speech_masking, rng.as_deref_mut()) {
            (Some(cfg), Some(r)) => (plan_spans(m_prev, r, cfg), plan_spans(m_cur, r, cfg)),
            (Some(_), None) => {
                return Err(SpectraError::Invalid("speech masking needs a random stream".into()));
            }
            (None, _) => (SpeechMaskPlan::unmasked(m_prev), SpeechMaskPlan::unmasked(m_cur)),
        };
        let masked_prev = apply_mask_in_graph(g, features_prev, &mask_prev)?;
        let masked_cur = apply_mask_in_graph(g, features_cur, &mask_cur)?;
        let f_prev = self.projection.project_features(g, store, masked_prev)?;
        let f_cur = self.projection.project_features(g, store, masked_cur)?;
        let cls = g.param(store, self.cls);
        let sep = g.param(store, self.sep);
        let seq = assemble_speech_sequence(g, f_prev, f_cur, cls, sep)?;
        let h_speech = self
            .speech_encoder
            .encode_speech(g, store, seq.features, &vec![true; seq.len()], rng.as_deref_mut())?;

        let total = token_ids.len() + seq.len();
        let fused = self.fusion.fuse(
            g,
            store,
            h_text,
            h_speech,
            (seq.len_prev, seq.len_cur),
            &vec![true; total],
            rng,
        )?;
        Ok(ForwardOutput {
            fused,
            features_prev,
            features_cur,
            mask_prev,
            mask_cur,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_samples, generate_synthetic, SyntheticConfig};
    use crate::text::{tokenize_sample, Vocab, WhitespaceTokenizer};
    use rand::SeedableRng;

    #[test]
    fn forward_lengths_follow_inputs() {
        let dialogs = generate_synthetic(&SyntheticConfig { num_dialogs: 2, ..Default::default() }, 0).unwrap();
        let vocab = Vocab::from_dialogs(&dialogs);
        let (model, store) = Spectra::new(ModelConfig::default(), vocab.len(), 0).unwrap();
        let store = store.cast::<f32>();
        for s in build_samples(&dialogs[0], 7).unwrap() {
            let t = tokenize_sample(&s, &vocab, &WhitespaceTokenizer, 256).unwrap();
            let mut g = Graph::new();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let speech = SpeechInput {
                prev: &s.speech_prev,
                cur: &s.speech_cur,
            };
            let out = model
                .forward(&mut g, &store, &t, &t.token_ids, speech, Some(&SpanMaskConfig::spectra()), Some(&mut rng))
                .unwrap();
            let m_prev = s.speech_prev.len() / 10;
            let m_cur = s.speech_cur.len() / 10;
            assert_eq!(out.fused.len(), t.len() + m_prev + m_cur + 2);
            assert_eq!(g.shape(out.fused.hidden), &[out.fused.len(), 64]);
            assert_eq!(out.mask_prev.len(), m_prev);
        }
    }

    #[test]
    fn mismatched_widths_are_rejected() {
        let cfg = ModelConfig {
            speech: EncoderConfig { d_h: 32, ..EncoderConfig::desk() },
            ..Default::default()
        };
        assert!(Spectra::new(cfg, 10, 0).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let (_, a) = Spectra::new(ModelConfig::default(), 20, 4).unwrap();
        let (_, b) = Spectra::new(ModelConfig::default(), 20, 4).unwrap();
        for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
            assert_eq!(x.value, y.value);
        }
    }
}
