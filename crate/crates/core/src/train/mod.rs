//! Pre-training configuration, the per-sample objective, the training loop,
//! checkpoints and metrics.

mod checkpoint;
mod metrics;
mod optim;
mod schedule;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spectra_numerics::{Float, Graph, ParamStore, Var};

use crate::corpus::{build_samples, Dialog, Sample};
use crate::error::{Result, SpectraError};
use crate::model::{ForwardOutput, ModelConfig, SpeechInput, Spectra};
use crate::objectives::{
    cmam_loss, cmlm_loss, crs_logits, crs_loss, joint_loss, make_crs_sample, tpp_loss, tpp_predictions, CmamTargets,
    CrsLabel, LossComponents, LossWeights, TurnPool,
};
use crate::speech::SpanMaskConfig;
use crate::text::{mask_tokens, tokenize_sample, TextMaskConfig, TextMaskPlan, TokenizedInput, Vocab, WhitespaceTokenizer};

pub use checkpoint::{Checkpoint, TensorRecord, CHECKPOINT_VERSION};
pub use metrics::{read_metrics, truncate_metrics, MetricsWriter, StepMetrics};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use schedule::{lr_schedule, warmup_steps, Schedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrsConfig {
    pub enabled: bool,
    /// Probabilities of positive, speech-, text- and both-substituted.
    pub class_probs: [f64; 4],
}

impl Default for CrsConfig {
    fn default() -> Self {
        CrsConfig {
            enabled: true,
            class_probs: [0.25; 4],
        }
    }
}

/// Settings of the per-sample pre-training objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub crs: CrsConfig,
    pub text_mask: TextMaskConfig,
    /// Frame masking for CMAM; `None` disables both masking and CMAM.
    pub speech_mask: Option<SpanMaskConfig>,
    /// Whether TPP also uses words whose boundary tokens were masked.
    pub tpp_on_masked: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            weights: LossWeights::default(),
            crs: CrsConfig::default(),
            text_mask: TextMaskConfig::default(),
            speech_mask: Some(SpanMaskConfig::spectra()),
            tpp_on_masked: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub steps: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub schedule: Schedule,
    pub optimizer: AdamWConfig,
    /// Global gradient-norm limit; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// History turns per sample.
    pub k: usize,
    /// Leading fraction of dialogs used for training.
    pub corpus_fraction: f64,
    /// Cap on the number of training samples.
    pub max_samples: Option<usize>,
    pub checkpoint_every: Option<usize>,
    pub objective: ObjectiveConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 8,
            steps: 500,
            peak_lr: 1e-3,
            warmup_frac: 0.01,
            schedule: Schedule::LinearDecay,
            optimizer: AdamWConfig::default(),
            grad_clip: Some(1.0),
            k: 7,
            corpus_fraction: 1.0,
            max_samples: None,
            checkpoint_every: None,
            objective: ObjectiveConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SpectraError::Config(m));
        if self.batch_size == 0 || self.steps == 0 {
            return bad("batch_size and steps must be positive".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad(format!("warmup_frac {} outside [0, 1]", self.warmup_frac));
        }
        if !(self.corpus_fraction > 0.0 && self.corpus_fraction <= 1.0) {
            return bad(format!("corpus_fraction {} outside (0, 1]", self.corpus_fraction));
        }
        if !(self.peak_lr > 0.0) {
            return bad("peak_lr must be positive".into());
        }
        self.objective.weights.validate()?;
        if let Some(m) = &self.objective.speech_mask {
            m.validate()?;
        }
        self.model.validate()
    }

    /// Reads a JSON config; missing keys take their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(SpectraError::io(path))?;
        let cfg: TrainConfig = serde_json::from_slice(&raw).map_err(SpectraError::json(path))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Training samples and the dialogs negatives are drawn from.
#[derive(Clone, Debug)]
pub struct PretrainData {
    pub dialogs: Vec<Dialog>,
    pub samples: Vec<Sample>,
}

impl PretrainData {
    /// Keeps the leading `corpus_fraction` of dialogs (at least one), builds
    /// samples with `k` history turns and truncates to `max_samples`.
    pub fn new(dialogs: &[Dialog], cfg: &TrainConfig) -> Result<Self> {
        let keep = ((dialogs.len() as f64 * cfg.corpus_fraction).ceil() as usize).clamp(1, dialogs.len().max(1));
        let dialogs = dialogs[..keep.min(dialogs.len())].to_vec();
        let mut samples = Vec::new();
        for d in &dialogs {
            samples.extend(build_samples(d, cfg.k)?);
        }
        if let Some(max) = cfg.max_samples {
            samples.truncate(max);
        }
        if samples.is_empty() {
            return Err(SpectraError::Invalid("the training corpus yields no samples".into()));
        }
        Ok(PretrainData { dialogs, samples })
    }
}

/// Random stream for one training step; a function of seed and step only.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// Visiting order of samples in `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0DDB_A11E);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Sample indices of the batch at `step`: consecutive positions of the
/// concatenated epoch orders.
pub fn batch_indices(seed: u64, step: usize, batch_size: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch_size);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for pos in step * batch_size..(step + 1) * batch_size {
        let epoch = pos / n;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            cached = Some((epoch, epoch_order(seed, epoch, n)));
        }
        out.push(cached.as_ref().expect("cached order").1[pos % n]);
    }
    out
}

/// Plain values of one sample's loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentValues {
    pub joint: f64,
    pub tpp: Option<f64>,
    pub crs: Option<f64>,
    pub cmlm: Option<f64>,
    pub cmam: Option<f64>,
}

/// Everything computed for one sample.
#[derive(Clone, Debug)]
pub struct SampleObjective<T> {
    pub joint: Var,
    pub components: LossComponents,
    pub values: ComponentValues,
    pub tokenized: TokenizedInput,
    pub text_plan: TextMaskPlan,
    pub forward: ForwardOutput,
    pub cmam_targets: Option<CmamTargets<T>>,
}

/// Builds the joint objective of a (possibly CRS-corrupted) sample. Random
/// draws happen in a fixed order: text masking, then frame masking and
/// dropout inside the forward pass. `fixed_cmam_targets` replaces the
/// reconstruction targets, which lets finite-difference checks hold the
/// stop-gradient targets constant.
#[allow(clippy::too_many_arguments)]
pub fn sample_objective<T: Float>(
    model: &Spectra,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    vocab: &Vocab,
    sample: &Sample,
    label: CrsLabel,
    cfg: &ObjectiveConfig,
    rng: &mut ChaCha8Rng,
    fixed_cmam_targets: Option<&CmamTargets<T>>,
) -> Result<SampleObjective<T>> {
    let tokenized = tokenize_sample(sample, vocab, &WhitespaceTokenizer, model.config.max_text_len)?;
    let text_plan = mask_tokens(&tokenized, vocab, rng, &cfg.text_mask);
    let ids = text_plan.apply(&tokenized.token_ids, vocab);
    let speech = SpeechInput {
        prev: &sample.speech_prev,
        cur: &sample.speech_cur,
    };
    let forward = model.forward(g, store, &tokenized, &ids, speech, cfg.speech_mask.as_ref(), Some(rng))?;
    let fused = &forward.fused;
    let heads = &model.heads;

    let mut parts = LossComponents::default();
    if cfg.weights.alpha > 0.0 {
        let words: Vec<_> = tokenized
            .word_boundaries
            .iter()
            .filter(|b| {
                cfg.tpp_on_masked
                    || !text_plan.positions.iter().any(|&p| p == b.first_token || p == b.last_token)
            })
            .cloned()
            .collect();
        if !words.is_empty() {
            parts.tpp = Some(tpp_loss(g, store, fused, &words, &heads.tpp)?);
        }
    }
    if cfg.crs.enabled {
        parts.crs = Some(crs_loss(g, store, fused, label, &heads.crs)?);
    }
    if !text_plan.is_empty() {
        parts.cmlm = Some(cmlm_loss(g, store, fused, &text_plan, &heads.lm)?);
    }
    let mut cmam_targets = None;
    if cfg.speech_mask.is_some() {
        let include = match label {
            CrsLabel::Positive | CrsLabel::TextSubstituted => (true, true),
            CrsLabel::SpeechSubstituted => (true, false),
            CrsLabel::BothSubstituted => (false, false),
        };
        let targets = match fixed_cmam_targets {
            Some(t) => t.clone(),
            None => CmamTargets::collect(
                g,
                fused,
                (forward.features_prev, forward.features_cur),
                (&forward.mask_prev, &forward.mask_cur),
                include,
            )?,
        };
        if !targets.is_empty() {
            parts.cmam = Some(cmam_loss(g, store, fused, &targets, &heads.cmam)?);
        }
        cmam_targets = Some(targets);
    }
    let joint = joint_loss(g, &parts, &cfg.weights)?;
    let value = |g: &Graph<T>, v: Option<Var>| v.map(|v| g.value(v).item().to_f64_lossy());
    let values = ComponentValues {
        joint: g.value(joint).item().to_f64_lossy(),
        tpp: value(g, parts.tpp),
        crs: value(g, parts.crs),
        cmlm: value(g, parts.cmlm),
        cmam: value(g, parts.cmam),
    };
    Ok(SampleObjective {
        joint,
        components: parts,
        values,
        tokenized,
        text_plan,
        forward,
        cmam_targets,
    })
}

/// Model, parameters and optimizer state of a pre-training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub model: Spectra,
    pub store: ParamStore<f32>,
    pub optimizer: AdamW<f32>,
    pub step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let (model, store) = Spectra::new(config.model.clone(), vocab.len(), config.seed)?;
        let store = store.cast::<f32>();
        let optimizer = AdamW::new(config.optimizer, &store);
        Ok(Trainer {
            config,
            vocab,
            model,
            store,
            optimizer,
            step: 0,
        })
    }

    /// One optimizer update on the batch of the current step.
    pub fn train_step(&mut self, data: &PretrainData) -> Result<StepMetrics> {
        let started = Instant::now();
        let cfg = &self.config;
        if self.step >= cfg.steps {
            return Err(SpectraError::Invalid(format!("run already finished at step {}", self.step)));
        }
        let pool = if cfg.objective.crs.enabled { Some(TurnPool::new(&data.dialogs)?) } else { None };
        let mut rng = step_rng(cfg.seed, self.step);
        let batch = batch_indices(cfg.seed, self.step, cfg.batch_size, data.samples.len());
        let scale = 1.0 / batch.len() as f64;
        self.store.zero_grad();
        let mut sums = [0.0f64; 5];
        let mut counts = [0usize; 5];
        for &idx in &batch {
            let (sample, label) = match &pool {
                Some(pool) => make_crs_sample(&data.samples[idx], pool, &mut rng, &cfg.objective.crs.class_probs)?,
                None => (data.samples[idx].clone(), CrsLabel::Positive),
            };
            let mut g = Graph::new();
            let obj = sample_objective(
                &self.model,
                &mut g,
                &self.store,
                &self.vocab,
                &sample,
                label,
                &cfg.objective,
                &mut rng,
                None,
            )?;
            let v = obj.values;
            if !v.joint.is_finite() {
                return Err(SpectraError::Invalid(format!(
                    "non-finite loss at step {} (dialog {}, turn {})",
                    self.step, sample.dialog_id, sample.target_turn_index
                )));
            }
            for (i, x) in [Some(v.joint), v.tpp, v.crs, v.cmlm, v.cmam].into_iter().enumerate() {
                if let Some(x) = x {
                    sums[i] += x;
                    counts[i] += 1;
                }
            }
            let scaled = g.scale(obj.joint, scale)?;
            g.backward(scaled, &mut self.store)?;
        }
        let grad_norm = match cfg.grad_clip {
            Some(max) => clip_grad_norm(&mut self.store, max),
            None => self.store.grad_norm(),
        };
        let lr = lr_schedule(self.step + 1, cfg.steps, cfg.warmup_frac, cfg.peak_lr, cfg.schedule)?;
        self.optimizer.step(&mut self.store, lr)?;
        self.step += 1;
        let mean = |i: usize| (counts[i] > 0).then(|| sums[i] / counts[i] as f64);
        Ok(StepMetrics {
            step: self.step,
            loss: mean(0).unwrap_or(0.0),
            tpp: mean(1),
            crs: mean(2),
            cmlm: mean(3),
            cmam: mean(4),
            lr,
            grad_norm,
            wall_time: started.elapsed().as_secs_f64(),
        })
    }

    /// Trains until `cfg.steps`, logging every step and saving checkpoints
    /// into `out_dir` at the configured interval and at the end.
    pub fn run(&mut self, data: &PretrainData, out_dir: Option<&Path>, mut on_step: impl FnMut(&StepMetrics)) -> Result<()> {
        let mut writer = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(SpectraError::io(dir))?;
                Some(MetricsWriter::append(&dir.join("metrics.jsonl"))?)
            }
            None => None,
        };
        while self.step < self.config.steps {
            let m = self.train_step(data)?;
            if let Some(w) = writer.as_mut() {
                w.write(&m)?;
            }
            on_step(&m);
            if let Some(dir) = out_dir {
                let every = self.config.checkpoint_every.unwrap_or(0);
                if (every > 0 && self.step.is_multiple_of(every)) || self.step == self.config.steps {
                    self.checkpoint().save(&dir.join(format!("checkpoint-{:06}.json", self.step)))?;
                }
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.config, &self.vocab, &self.store, &self.optimizer, self.step, None)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let vocab = ckpt.vocab();
        let mut trainer = Trainer::new(ckpt.config.clone(), vocab)?;
        ckpt.restore_params(&mut trainer.store, false)?;
        trainer.optimizer = ckpt.restore_optimizer(&trainer.store)?;
        trainer.step = ckpt.step;
        Ok(trainer)
    }
}

/// Training-distribution quality of a pre-trained model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainEval {
    /// Mean absolute error of normalized start and end times over every
    /// word of turns `i − 1` and `i`, without any masking.
    pub tpp_mae: f64,
    /// Accuracy of the four-way classifier on freshly drawn CRS samples.
    pub crs_accuracy: f64,
    pub words: usize,
    pub crs_samples: usize,
}

/// Evaluates TPP error on clean samples and CRS accuracy on `crs_draws`
/// corrupted copies of each sample (drawn from `seed`).
pub fn evaluate_pretrain<T: Float>(
    model: &Spectra,
    store: &ParamStore<T>,
    vocab: &Vocab,
    data: &PretrainData,
    crs_probs: &[f64; 4],
    crs_draws: usize,
    seed: u64,
) -> Result<PretrainEval> {
    let mut abs_err = 0.0;
    let mut words = 0;
    for s in &data.samples {
        let t = tokenize_sample(s, vocab, &WhitespaceTokenizer, model.config.max_text_len)?;
        let mut g = Graph::new();
        let speech = SpeechInput {
            prev: &s.speech_prev,
            cur: &s.speech_cur,
        };
        let out = model.forward(&mut g, store, &t, &t.token_ids, speech, None, None)?;
        let preds = tpp_predictions(&mut g, store, &out.fused, &t.word_boundaries, &model.heads.tpp)?;
        let la = model.heads.tpp.max_seconds;
        for (b, (ps, pe)) in t.word_boundaries.iter().zip(preds) {
            abs_err += (ps - b.start_time / la).abs() + (pe - b.end_time / la).abs();
            words += 1;
        }
    }
    let mut correct = 0;
    let mut total = 0;
    if crs_draws > 0 {
        let pool = TurnPool::new(&data.dialogs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in &data.samples {
            for _ in 0..crs_draws {
                let (c, label) = make_crs_sample(s, &pool, &mut rng, crs_probs)?;
                let t = tokenize_sample(&c, vocab, &WhitespaceTokenizer, model.config.max_text_len)?;
                let mut g = Graph::new();
                let speech = SpeechInput {
                    prev: &c.speech_prev,
                    cur: &c.speech_cur,
                };
                let out = model.forward(&mut g, store, &t, &t.token_ids, speech, None, None)?;
                let logits = crs_logits(&mut g, store, &out.fused, &model.heads.crs)?;
                let l = g.value(logits).to_f64_vec();
                let pred = (0..l.len()).fold(0, |best, i| if l[i] > l[best] { i } else { best });
                correct += usize::from(pred == label.class());
                total += 1;
            }
        }
    }
    Ok(PretrainEval {
        tpp_mae: if words > 0 { abs_err / (2 * words) as f64 } else { 0.0 },
        crs_accuracy: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
        words,
        crs_samples: total,
    })
}
