//! Span masking of convolutional speech frames.
//!
//! One span length `n` is drawn per call. A linear scan over frame indices
//! triggers a span with probability `trigger_prob`; a triggered span marks
//! frames `[i, i + n)` (clipped to the sequence), corrupts each marked frame
//! and resumes the scan at `i + n`. A marked frame is zeroed, replaced by a
//! random frame of the same sequence, or left as is.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spectra_numerics::{Float, Graph, Tensor, Var};

use crate::error::{Result, SpectraError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanMaskConfig {
    /// Inclusive bounds of the span length drawn per call.
    pub span_min: usize,
    pub span_max: usize,
    pub trigger_prob: f64,
    pub zero_frac: f64,
    pub random_frac: f64,
}

impl SpanMaskConfig {
    /// Long spans of 20 to 50 frames triggered with probability 0.15.
    pub fn spectra() -> Self {
        SpanMaskConfig {
            span_min: 20,
            span_max: 50,
            trigger_prob: 0.15,
            zero_frac: 0.8,
            random_frac: 0.1,
        }
    }

    /// Short fixed spans of 3 frames triggered with probability 0.05.
    pub fn baseline() -> Self {
        SpanMaskConfig {
            span_min: 3,
            span_max: 3,
            trigger_prob: 0.05,
            zero_frac: 0.8,
            random_frac: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.span_min == 0 || self.span_min > self.span_max {
            return Err(SpectraError::Config(format!(
                "span length range [{}, {}] is empty or starts at 0",
                self.span_min, self.span_max
            )));
        }
        let probs = [self.trigger_prob, self.zero_frac, self.random_frac];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || self.zero_frac + self.random_frac > 1.0 {
            return Err(SpectraError::Config("masking probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

impl Default for SpanMaskConfig {
    fn default() -> Self {
        Self::spectra()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameAction {
    Unmasked,
    Zero,
    /// Replaced by frame `src` of the unmasked sequence.
    Random(usize),
    /// Masked but left unaltered.
    Keep,
}

impl FrameAction {
    pub fn is_masked(self) -> bool {
        self != FrameAction::Unmasked
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeechMaskPlan {
    pub span_len: usize,
    pub span_starts: Vec<usize>,
    pub actions: Vec<FrameAction>,
}

impl SpeechMaskPlan {
    pub fn unmasked(len: usize) -> Self {
        SpeechMaskPlan {
            span_len: 0,
            span_starts: Vec::new(),
            actions: vec![FrameAction::Unmasked; len],
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.actions.len()).filter(|&i| self.actions[i].is_masked()).collect()
    }

    pub fn masked_count(&self) -> usize {
        self.actions.iter().filter(|a| a.is_masked()).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        if self.actions.is_empty() {
            0.0
        } else {
            self.masked_count() as f64 / self.actions.len() as f64
        }
    }

    /// Applies the plan to an `l × d` feature matrix.
    pub fn apply<T: Float>(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_len(features.shape())?;
        let d = features.cols();
        let mut out = features.clone();
        for (i, a) in self.actions.iter().enumerate() {
            let row = &mut out.data_mut()[i * d..(i + 1) * d];
            match *a {
                FrameAction::Zero => row.fill(T::zero()),
                FrameAction::Random(src) => row.copy_from_slice(features.row(src)),
                FrameAction::Unmasked | FrameAction::Keep => {}
            }
        }
        Ok(out)
    }

    fn check_len(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 2 || shape[0] != self.actions.len() {
            return Err(SpectraError::Invalid(format!(
                "mask plan covers {} frames but features have shape {shape:?}",
                self.actions.len()
            )));
        }
        Ok(())
    }
}

/// Draws a plan for a sequence of `len` frames.
pub fn plan_spans(len: usize, rng: &mut impl Rng, cfg: &SpanMaskConfig) -> SpeechMaskPlan {
    let span_len = rng.random_range(cfg.span_min..=cfg.span_max);
    let mut actions = vec![FrameAction::Unmasked; len];
    let mut span_starts = Vec::new();
    let mut i = 0;
    while i < len {
        if rng.random::<f64>() < cfg.trigger_prob {
            span_starts.push(i);
            for j in 0..span_len.min(len - i) {
                let t: f64 = rng.random();
                actions[i + j] = if t < cfg.zero_frac {
                    FrameAction::Zero
                } else if t < cfg.zero_frac + cfg.random_frac {
                    FrameAction::Random(rng.random_range(0..len))
                } else {
                    FrameAction::Keep
                };
            }
            i += span_len;
        } else {
            i += 1;
        }
    }
    SpeechMaskPlan {
        span_len,
        span_starts,
        actions,
    }
}

/// Masks an `l × feature_dim` matrix of extractor outputs.
pub fn mask_speech_frames<T: Float>(
    features: &Tensor<T>,
    rng: &mut impl Rng,
    cfg: &SpanMaskConfig,
) -> Result<(Tensor<T>, SpeechMaskPlan)> {
    features.shape().first().copied().filter(|&l| l >= 1).ok_or_else(|| {
        SpectraError::Invalid(format!("cannot mask features of shape {:?}", features.shape()))
    })?;
    let plan = plan_spans(features.rows(), rng, cfg);
    let masked = plan.apply(features)?;
    Ok((masked, plan))
}

/// The short-span baseline masker, parameterized by `cfg` (see
/// [`SpanMaskConfig::baseline`]).
pub fn mask_speech_frames_baseline<T: Float>(
    features: &Tensor<T>,
    rng: &mut impl Rng,
    cfg: &SpanMaskConfig,
) -> Result<(Tensor<T>, SpeechMaskPlan)> {
    mask_speech_frames(features, rng, cfg)
}

/// Applies `plan` to a recorded `l × d` feature node: rows are gathered
/// (identity or random source) and zeroed rows are multiplied by 0.
pub fn apply_mask_in_graph<T: Float>(g: &mut Graph<T>, features: Var, plan: &SpeechMaskPlan) -> Result<Var> {
    plan.check_len(g.shape(features))?;
    if plan.masked_count() == 0 {
        return Ok(features);
    }
    let d = g.shape(features)[1];
    let sources: Vec<usize> = plan
        .actions
        .iter()
        .enumerate()
        .map(|(i, a)| if let FrameAction::Random(src) = a { *src } else { i })
        .collect();
    let gathered = g.gather_rows(features, &sources)?;
    let scale = Tensor::from_fn(&[plan.len(), d], |k| {
        if plan.actions[k / d] == FrameAction::Zero {
            T::zero()
        } else {
            T::one()
        }
    });
    let scale = g.constant(scale)?;
    Ok(g.mul(gathered, scale)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskRateEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub trials: u64,
}

const BLOCK: u64 = 10_000;

/// Monte Carlo estimate of the mean masked fraction over `trials` plans of
/// `len` frames. Trials run in fixed blocks, each with its own RNG stream,
/// and counts are integers, so the result is the same for any `threads`.
pub fn estimate_mask_rate(cfg: &SpanMaskConfig, len: usize, trials: u64, seed: u64, threads: usize) -> Result<MaskRateEstimate> {
    cfg.validate()?;
    if trials < BLOCK {
        return Err(SpectraError::Config(format!("need at least {BLOCK} trials, got {trials}")));
    }
    if len == 0 {
        return Err(SpectraError::Config("sequence length must be positive".into()));
    }
    let blocks = trials.div_ceil(BLOCK);
    let run_block = |b: u64| -> (u64, u128) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b);
        let n = BLOCK.min(trials - b * BLOCK);
        let (mut sum, mut sum_sq) = (0u64, 0u128);
        for _ in 0..n {
            let c = plan_spans(len, &mut rng, cfg).masked_count() as u64;
            sum += c;
            sum_sq += u128::from(c) * u128::from(c);
        }
        (sum, sum_sq)
    };
    let threads = threads.clamp(1, blocks as usize);
    let (sum, sum_sq) = if threads == 1 {
        (0..blocks).map(run_block).fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1))
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads as u64)
                .map(|t| {
                    let run_block = &run_block;
                    s.spawn(move || {
                        (t..blocks)
                            .step_by(threads)
                            .map(run_block)
                            .fold((0u64, 0u128), |a, b| (a.0 + b.0, a.1 + b.1))
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("masking worker panicked"))
                .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1))
        })
    };
    let t = trials as f64;
    let l = len as f64;
    let mean_count = sum as f64 / t;
    let var_count = (sum_sq as f64 - t * mean_count * mean_count) / (t - 1.0);
    Ok(MaskRateEstimate {
        mean: mean_count / l,
        stderr: (var_count.max(0.0) / t).sqrt() / l,
        trials,
    })
}
