//! Convolutional speech front end and acoustic frame masking.

mod frontend;
mod masking;

pub use frontend::{
    assemble_speech_sequence, ConvLayerSpec, FeatureProjection, FrontendConfig, SpeechFrontend, SpeechSequence,
};
pub use masking::{
    apply_mask_in_graph, estimate_mask_rate, mask_speech_frames, mask_speech_frames_baseline, plan_spans, FrameAction,
    MaskRateEstimate, SpanMaskConfig, SpeechMaskPlan,
};
