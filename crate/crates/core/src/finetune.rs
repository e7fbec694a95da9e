//! Downstream prediction head, task definitions, evaluation, and the
//! synthetic cross-modal classification task.

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use spectra_numerics::{Float, Graph, ParamStore, Tensor, Var};

use crate::corpus::{word_topic, Dialog, Sample, Substitution, SyntheticConfig};
use crate::encoders::FusedRepresentation;
use crate::error::{Result, SpectraError};
use crate::model::{SpeechInput, Spectra};
use crate::nn::{Init, Linear};
use crate::text::{tokenize_sample, Vocab, WhitespaceTokenizer};
use crate::train::{batch_indices, clip_grad_norm, lr_schedule, step_rng, AdamW, Checkpoint, StepMetrics, TrainConfig};

/// `y = W2 · GELU(W1 · h + b1) + b2` on the `<s>` state.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub hidden: Linear,
    pub output: Linear,
}

impl PredictionHead {
    pub fn new(init: &mut Init<'_>, d_h: usize, d_o: usize) -> Self {
        PredictionHead {
            hidden: init.linear("finetune/w1", d_h, d_h, true),
            output: init.linear("finetune/w2", d_h, d_o, true),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Squared-error loss; binary accuracy by sign.
    Regression,
    /// Cross-entropy loss; accuracy by argmax.
    Classification,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub num_outputs: usize,
}

impl TaskSpec {
    pub fn regression() -> Self {
        TaskSpec {
            kind: TaskKind::Regression,
            num_outputs: 1,
        }
    }

    pub fn classification(classes: usize) -> Self {
        TaskSpec {
            kind: TaskKind::Classification,
            num_outputs: classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TaskKind::Regression if self.num_outputs != 1 => {
                Err(SpectraError::Config("regression tasks have exactly one output".into()))
            }
            TaskKind::Classification if self.num_outputs < 2 => {
                Err(SpectraError::Config("classification needs at least two classes".into()))
            }
            _ => Ok(()),
        }
    }

    fn check_label(&self, label: f64) -> Result<()> {
        let ok = match self.kind {
            TaskKind::Regression => label.is_finite(),
            TaskKind::Classification => label >= 0.0 && label.fract() == 0.0 && (label as usize) < self.num_outputs,
        };
        if ok {
            Ok(())
        } else {
            Err(SpectraError::Invalid(format!("label {label} does not fit task {self:?}")))
        }
    }
}

/// `1 × d_o` prediction from the first fused state.
pub fn predict<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, fused: &FusedRepresentation, head: &PredictionHead) -> Result<Var> {
    let h0 = g.slice_rows(fused.hidden, 0, 1)?;
    let z = head.hidden.forward(g, store, h0)?;
    let z = g.gelu(z)?;
    head.output.forward(g, store, z)
}

/// Loss of one prediction against its label.
pub fn task_loss<T: Float>(g: &mut Graph<T>, task: &TaskSpec, prediction: Var, label: f64) -> Result<Var> {
    task.check_label(label)?;
    if g.shape(prediction) != [1, task.num_outputs] {
        return Err(SpectraError::Invalid(format!(
            "prediction shape {:?} does not match {} outputs",
            g.shape(prediction),
            task.num_outputs
        )));
    }
    Ok(match task.kind {
        TaskKind::Regression => g.mse(prediction, &Tensor::full(&[1, 1], T::of(label)))?,
        TaskKind::Classification => g.cross_entropy(prediction, &[label as usize])?,
    })
}

/// Accuracy of `predictions` against `labels`: agreement of sign (positive
/// above 0) for regression, argmax for classification.
pub fn score_predictions(task: &TaskSpec, predictions: &[Vec<f64>], labels: &[f64]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(SpectraError::Invalid(format!(
            "cannot score {} predictions against {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut correct = 0usize;
    for (p, &y) in predictions.iter().zip(labels) {
        if p.len() != task.num_outputs {
            return Err(SpectraError::Invalid(format!("prediction of size {} for {} outputs", p.len(), task.num_outputs)));
        }
        let hit = match task.kind {
            TaskKind::Regression => (p[0] > 0.0) == (y > 0.0),
            TaskKind::Classification => {
                let arg = (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
                arg as f64 == y
            }
        };
        correct += usize::from(hit);
    }
    Ok(correct as f64 / predictions.len() as f64)
}

/// A labeled downstream input: text turns plus the two speech turns.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskExample {
    pub text_turns: Vec<Vec<String>>,
    pub sample_rate: u32,
    pub speech_prev: Arc<[f32]>,
    pub speech_cur: Arc<[f32]>,
    pub label: f64,
}

impl TaskExample {
    fn as_sample(&self) -> Sample {
        Sample {
            dialog_id: String::new(),
            target_turn_index: self.text_turns.len(),
            text_turns: self.text_turns.clone(),
            sample_rate: self.sample_rate,
            speech_prev: self.speech_prev.clone(),
            speech_cur: self.speech_cur.clone(),
            tpp_words: Vec::new(),
            text_turn_lengths: (0, 0),
            substitution: Substitution::default(),
        }
    }
}

/// Locator of a task example in a corpus: the text of turns
/// `text_turn − 1` and `text_turn` of one dialog, the speech of turns
/// `speech_turn − 1` and `speech_turn` of another (1-based indices).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub text_dialog: String,
    pub text_turn: usize,
    pub speech_dialog: String,
    pub speech_turn: usize,
    pub label: f64,
}

pub fn save_task(records: &[TaskRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(SpectraError::json(path))?);
        out.push('\n');
    }
    fs::write(path, out).map_err(SpectraError::io(path))
}

pub fn load_task(path: &Path) -> Result<Vec<TaskRecord>> {
    let text = fs::read_to_string(path).map_err(SpectraError::io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(SpectraError::json(path)))
        .collect()
}

fn topic_of(dialog: &Dialog, cfg: &SyntheticConfig) -> Result<usize> {
    dialog
        .turns
        .iter()
        .flat_map(|t| &t.words)
        .find_map(|w| word_topic(&w.word, cfg))
        .ok_or_else(|| SpectraError::Invalid(format!("dialog {} has no topic words", dialog.dialog_id)))
}

/// Draws `n` examples whose label is `2·parity(topic of the text dialog) +
/// parity(topic of the speech dialog)`, so neither modality alone
/// determines it.
pub fn make_crossmodal_task(dialogs: &[Dialog], cfg: &SyntheticConfig, n: usize, seed: u64) -> Result<Vec<TaskRecord>> {
    let usable: Vec<&Dialog> = dialogs.iter().filter(|d| d.turns.len() >= 2).collect();
    if usable.len() < 2 {
        return Err(SpectraError::Invalid("the task needs at least two dialogs with two or more turns".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let a = usable[rng.random_range(0..usable.len())];
        let b = loop {
            let b = usable[rng.random_range(0..usable.len())];
            if b.dialog_id != a.dialog_id {
                break b;
            }
        };
        let label = 2 * (topic_of(a, cfg)? % 2) + topic_of(b, cfg)? % 2;
        out.push(TaskRecord {
            text_dialog: a.dialog_id.clone(),
            text_turn: a.turns[rng.random_range(1..a.turns.len())].turn_index,
            speech_dialog: b.dialog_id.clone(),
            speech_turn: b.turns[rng.random_range(1..b.turns.len())].turn_index,
            label: label as f64,
        });
    }
    Ok(out)
}

/// Resolves records against a corpus. With `speech_noise = Some((std,
/// seed))` both speech turns are replaced by Gaussian noise of the same
/// length, which removes all acoustic information.
pub fn resolve_task(records: &[TaskRecord], dialogs: &[Dialog], speech_noise: Option<(f64, u64)>) -> Result<Vec<TaskExample>> {
    let find = |id: &str, turn: usize| -> Result<(&Dialog, usize)> {
        let d = dialogs
            .iter()
            .find(|d| d.dialog_id == id)
            .ok_or_else(|| SpectraError::Invalid(format!("task references unknown dialog {id}")))?;
        let pos = d
            .turns
            .iter()
            .position(|t| t.turn_index == turn)
            .filter(|&p| p >= 1)
            .ok_or_else(|| SpectraError::Invalid(format!("dialog {id} has no turn pair ending at {turn}")))?;
        Ok((d, pos))
    };
    let mut out = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let (td, tp) = find(&r.text_dialog, r.text_turn)?;
        let (sd, sp) = find(&r.speech_dialog, r.speech_turn)?;
        let (prev, cur) = (&sd.turns[sp - 1], &sd.turns[sp]);
        let (speech_prev, speech_cur): (Arc<[f32]>, Arc<[f32]>) = match speech_noise {
            None => (prev.waveform.clone(), cur.waveform.clone()),
            Some((std, seed)) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let dist = Normal::new(0.0, std).map_err(|e| SpectraError::Config(format!("noise std {std}: {e}")))?;
                let mut noise = |len: usize| -> Arc<[f32]> { (0..len).map(|_| dist.sample(&mut rng) as f32).collect() };
                (noise(prev.waveform.len()), noise(cur.waveform.len()))
            }
        };
        out.push(TaskExample {
            text_turns: vec![td.turns[tp - 1].transcript(), td.turns[tp].transcript()],
            sample_rate: cur.sample_rate,
            speech_prev,
            speech_cur,
            label: r.label,
        });
    }
    Ok(out)
}

/// A model with a prediction head, its parameters and optimizer state.
#[derive(Clone, Debug)]
pub struct Finetuner {
    pub config: TrainConfig,
    pub task: TaskSpec,
    pub vocab: Vocab,
    pub model: Spectra,
    pub head: PredictionHead,
    pub store: ParamStore<f32>,
    pub optimizer: AdamW<f32>,
    pub step: usize,
}

impl Finetuner {
    /// Starts from `init` (a pre-training or fine-tuning checkpoint, whose
    /// model config and vocabulary take precedence) or from scratch.
    pub fn new(mut config: TrainConfig, task: TaskSpec, vocab: Vocab, init: Option<&Checkpoint>) -> Result<Self> {
        task.validate()?;
        let vocab = match init {
            Some(ckpt) => {
                config.model = ckpt.config.model.clone();
                ckpt.vocab()
            }
            None => vocab,
        };
        config.validate()?;
        let (model, mut store) = Spectra::new(config.model.clone(), vocab.len(), config.seed)?;
        let head = PredictionHead::new(
            &mut Init::new(&mut store, config.seed ^ 0xF1E7_0000),
            config.model.d_h(),
            task.num_outputs,
        );
        let mut store = store.cast::<f32>();
        if let Some(ckpt) = init {
            ckpt.restore_params(&mut store, true)?;
        }
        let optimizer = AdamW::new(config.optimizer, &store);
        Ok(Finetuner {
            config,
            task,
            vocab,
            model,
            head,
            store,
            optimizer,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let task = ckpt
            .task
            .ok_or_else(|| SpectraError::Invalid("checkpoint carries no fine-tuning task".into()))?;
        let mut f = Finetuner::new(ckpt.config.clone(), task, ckpt.vocab(), None)?;
        ckpt.restore_params(&mut f.store, false)?;
        f.optimizer = ckpt.restore_optimizer(&f.store)?;
        f.step = ckpt.step;
        Ok(f)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.config, &self.vocab, &self.store, &self.optimizer, self.step, Some(self.task))
    }

    fn forward_example<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ex: &TaskExample,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let sample = ex.as_sample();
        let t = tokenize_sample(&sample, &self.vocab, &WhitespaceTokenizer, self.model.config.max_text_len)?;
        let speech = SpeechInput {
            prev: &ex.speech_prev,
            cur: &ex.speech_cur,
        };
        let out = self.model.forward(g, store, &t, &t.token_ids, speech, None, rng)?;
        predict(g, store, &out.fused, &self.head)
    }

    pub fn train_step(&mut self, examples: &[TaskExample]) -> Result<StepMetrics> {
        let started = Instant::now();
        let cfg = &self.config;
        if examples.is_empty() {
            return Err(SpectraError::Invalid("fine-tuning set is empty".into()));
        }
        let mut rng = step_rng(cfg.seed, self.step);
        let batch = batch_indices(cfg.seed, self.step, cfg.batch_size, examples.len());
        let scale = 1.0 / batch.len() as f64;
        self.store.zero_grad();
        let mut total = 0.0;
        for &i in &batch {
            let mut g = Graph::new();
            let pred = self.forward_example(&mut g, &self.store, &examples[i], Some(&mut rng))?;
            let loss = task_loss(&mut g, &self.task, pred, examples[i].label)?;
            total += g.value(loss).item().to_f64_lossy();
            let scaled = g.scale(loss, scale)?;
            g.backward(scaled, &mut self.store)?;
        }
        let grad_norm = match cfg.grad_clip {
            Some(max) => clip_grad_norm(&mut self.store, max),
            None => self.store.grad_norm(),
        };
        let lr = lr_schedule(self.step + 1, cfg.steps, cfg.warmup_frac, cfg.peak_lr, cfg.schedule)?;
        self.optimizer.step(&mut self.store, lr)?;
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            loss: total * scale,
            tpp: None,
            crs: None,
            cmlm: None,
            cmam: None,
            lr,
            grad_norm,
            wall_time: started.elapsed().as_secs_f64(),
        })
    }

    pub fn predictions(&self, examples: &[TaskExample]) -> Result<Vec<Vec<f64>>> {
        examples
            .iter()
            .map(|ex| {
                let mut g = Graph::new();
                let p = self.forward_example(&mut g, &self.store, ex, None)?;
                Ok(g.value(p).to_f64_vec())
            })
            .collect()
    }

    /// Task metric on `examples`; an empty set is an error.
    pub fn evaluate(&self, examples: &[TaskExample]) -> Result<f64> {
        if examples.is_empty() {
            return Err(SpectraError::Invalid("cannot evaluate on an empty dataset".into()));
        }
        let preds = self.predictions(examples)?;
        let labels: Vec<f64> = examples.iter().map(|e| e.label).collect();
        score_predictions(&self.task, &preds, &labels)
    }
}
