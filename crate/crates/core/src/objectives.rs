//! Pre-training losses: temporal position prediction (TPP), cross-modal
//! response selection (CRS), cross-modal masked language modeling (CMLM)
//! and masked acoustic modeling (CMAM), and their weighted sum.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use spectra_numerics::{Float, Graph, ParamStore, Tensor, Var};

use crate::corpus::{Dialog, Sample, TurnSlot};
use crate::encoders::FusedRepresentation;
use crate::error::{Result, SpectraError};
use crate::nn::{Init, Linear};
use crate::speech::SpeechMaskPlan;
use crate::text::{TextMaskPlan, WordBoundary};

/// Linear start/end time regressors on fused text states.
#[derive(Clone, Debug)]
pub struct TppHead {
    pub start: Linear,
    pub end: Linear,
    /// Times are divided by this many seconds.
    pub max_seconds: f64,
}

impl TppHead {
    pub fn new(init: &mut Init<'_>, d_h: usize, max_seconds: f64) -> Self {
        TppHead {
            start: init.linear("heads/tpp/start", d_h, 1, false),
            end: init.linear("heads/tpp/end", d_h, 1, false),
            max_seconds,
        }
    }
}

/// Output heads used only during pre-training.
#[derive(Clone, Debug)]
pub struct PretrainHeads {
    pub tpp: TppHead,
    pub crs: Linear,
    pub lm: Linear,
    pub cmam: Linear,
}

impl PretrainHeads {
    pub fn new(init: &mut Init<'_>, d_h: usize, vocab_size: usize, feature_dim: usize, max_seconds: f64) -> Self {
        PretrainHeads {
            tpp: TppHead::new(init, d_h, max_seconds),
            crs: init.linear("heads/crs", d_h, 4, true),
            lm: init.linear("heads/lm", d_h, vocab_size, true),
            cmam: init.linear("heads/cmam", d_h, feature_dim, true),
        }
    }
}

fn zero<T: Float>(g: &mut Graph<T>) -> Result<Var> {
    Ok(g.constant(Tensor::scalar(T::zero()))?)
}

/// Mean over the given words of
/// `½[(W_start·h_first − s/L_a)² + (W_end·h_last − e/L_a)²]`. With every
/// word of turns `i − 1` and `i` this is the average over `l_{i−1} + l_i`
/// words. No words gives 0.
pub fn tpp_loss<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    fused: &FusedRepresentation,
    boundaries: &[WordBoundary],
    head: &TppHead,
) -> Result<Var> {
    if boundaries.is_empty() {
        return zero(g);
    }
    if !(head.max_seconds > 0.0) {
        return Err(SpectraError::Config(format!("TPP length limit {} must be positive", head.max_seconds)));
    }
    for b in boundaries {
        if b.first_token > b.last_token || b.last_token >= fused.text_len {
            return Err(SpectraError::Invalid(format!(
                "word boundary tokens {}..={} lie outside the text span of {} tokens",
                b.first_token, b.last_token, fused.text_len
            )));
        }
    }
    let w = boundaries.len();
    let firsts: Vec<usize> = boundaries.iter().map(|b| b.first_token).collect();
    let lasts: Vec<usize> = boundaries.iter().map(|b| b.last_token).collect();
    let la = head.max_seconds;
    let starts = Tensor::from_fn(&[w, 1], |i| T::of(boundaries[i].start_time / la));
    let ends = Tensor::from_fn(&[w, 1], |i| T::of(boundaries[i].end_time / la));
    let hf = g.gather_rows(fused.hidden, &firsts)?;
    let hl = g.gather_rows(fused.hidden, &lasts)?;
    let ps = head.start.forward(g, store, hf)?;
    let pe = head.end.forward(g, store, hl)?;
    let ls = g.mse(ps, &starts)?;
    let le = g.mse(pe, &ends)?;
    let sum = g.add(ls, le)?;
    Ok(g.scale(sum, 0.5)?)
}

/// Predicted normalized start and end times for each word.
pub fn tpp_predictions<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    fused: &FusedRepresentation,
    boundaries: &[WordBoundary],
    head: &TppHead,
) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(boundaries.len());
    if boundaries.is_empty() {
        return Ok(out);
    }
    let firsts: Vec<usize> = boundaries.iter().map(|b| b.first_token).collect();
    let lasts: Vec<usize> = boundaries.iter().map(|b| b.last_token).collect();
    let hf = g.gather_rows(fused.hidden, &firsts)?;
    let hl = g.gather_rows(fused.hidden, &lasts)?;
    let ps = head.start.forward(g, store, hf)?;
    let pe = head.end.forward(g, store, hl)?;
    let (ps, pe) = (g.value(ps).to_f64_vec(), g.value(pe).to_f64_vec());
    out.extend(ps.into_iter().zip(pe));
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CrsLabel {
    Positive,
    SpeechSubstituted,
    TextSubstituted,
    BothSubstituted,
}

impl CrsLabel {
    pub const ALL: [CrsLabel; 4] = [
        CrsLabel::Positive,
        CrsLabel::SpeechSubstituted,
        CrsLabel::TextSubstituted,
        CrsLabel::BothSubstituted,
    ];

    pub fn class(self) -> usize {
        self as usize
    }

    pub fn from_class(c: usize) -> Option<Self> {
        Self::ALL.get(c).copied()
    }

    pub fn substitutes_text(self) -> bool {
        matches!(self, CrsLabel::TextSubstituted | CrsLabel::BothSubstituted)
    }

    pub fn substitutes_speech(self) -> bool {
        matches!(self, CrsLabel::SpeechSubstituted | CrsLabel::BothSubstituted)
    }
}

/// Every turn of a corpus, for drawing substitutes uniformly over turns.
#[derive(Clone, Debug)]
pub struct TurnPool<'a> {
    dialogs: &'a [Dialog],
    turns: Vec<(usize, usize)>,
}

impl<'a> TurnPool<'a> {
    pub fn new(dialogs: &'a [Dialog]) -> Result<Self> {
        let with_turns = dialogs.iter().filter(|d| !d.turns.is_empty()).count();
        if with_turns < 2 {
            return Err(SpectraError::Invalid(
                "response selection negatives need at least two dialogs with turns".into(),
            ));
        }
        let turns = dialogs
            .iter()
            .enumerate()
            .flat_map(|(d, dlg)| (0..dlg.turns.len()).map(move |t| (d, t)))
            .collect();
        Ok(TurnPool { dialogs, turns })
    }

    /// A turn drawn uniformly from the turns of dialogs other than
    /// `dialog_id`.
    pub fn draw_other(&self, dialog_id: &str, rng: &mut impl Rng) -> &'a crate::corpus::Turn {
        loop {
            let (d, t) = self.turns[rng.random_range(0..self.turns.len())];
            if self.dialogs[d].dialog_id != dialog_id {
                return &self.dialogs[d].turns[t];
            }
        }
    }
}

/// Draws a CRS class from `class_probs` and applies it. Substituted text
/// and speech come from independently drawn turns of other dialogs. Words of
/// a substituted current turn lose their TPP targets; when both parts are
/// substituted no TPP target remains.
pub fn make_crs_sample(
    sample: &Sample,
    pool: &TurnPool<'_>,
    rng: &mut impl Rng,
    class_probs: &[f64; 4],
) -> Result<(Sample, CrsLabel)> {
    let dist = WeightedIndex::new(class_probs)
        .map_err(|e| SpectraError::Config(format!("invalid CRS class probabilities {class_probs:?}: {e}")))?;
    let label = CrsLabel::ALL[dist.sample(rng)];
    let mut out = sample.clone();
    if label.substitutes_text() {
        let turn = pool.draw_other(&sample.dialog_id, rng);
        *out.text_turns.last_mut().expect("sample has text turns") = turn.transcript();
        out.text_turn_lengths.1 = turn.word_count();
        out.substitution.text = true;
    }
    if label.substitutes_speech() {
        let turn = pool.draw_other(&sample.dialog_id, rng);
        out.speech_cur = turn.waveform.clone();
        out.substitution.speech = true;
    }
    match label {
        CrsLabel::Positive => {}
        CrsLabel::BothSubstituted => out.tpp_words.clear(),
        _ => out.tpp_words.retain(|w| w.slot == TurnSlot::Previous),
    }
    Ok((out, label))
}

/// Logits of the four-way classifier on the `<s>` state.
pub fn crs_logits<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, fused: &FusedRepresentation, head: &Linear) -> Result<Var> {
    let h0 = g.slice_rows(fused.hidden, 0, 1)?;
    head.forward(g, store, h0)
}

pub fn crs_loss<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    fused: &FusedRepresentation,
    label: CrsLabel,
    head: &Linear,
) -> Result<Var> {
    let logits = crs_logits(g, store, fused, head)?;
    Ok(g.cross_entropy(logits, &[label.class()])?)
}

/// Mean cross-entropy over masked text positions; 0 for an empty plan.
pub fn cmlm_loss<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    fused: &FusedRepresentation,
    plan: &TextMaskPlan,
    head: &Linear,
) -> Result<Var> {
    if plan.is_empty() {
        return zero(g);
    }
    if let Some(&p) = plan.positions.iter().find(|&&p| p >= fused.text_len) {
        return Err(SpectraError::Invalid(format!(
            "masked position {p} lies outside the text span of {} tokens",
            fused.text_len
        )));
    }
    let h = g.gather_rows(fused.hidden, &plan.positions)?;
    let logits = head.forward(g, store, h)?;
    Ok(g.cross_entropy(logits, &plan.labels)?)
}

/// Reconstruction targets for masked speech frames: fused row indices and
/// the matching rows of the unmasked extractor output.
#[derive(Clone, Debug)]
pub struct CmamTargets<T> {
    pub fused_rows: Vec<usize>,
    pub targets: Tensor<T>,
}

impl<T: Float> CmamTargets<T> {
    pub fn is_empty(&self) -> bool {
        self.fused_rows.is_empty()
    }

    /// Collects targets from masked frames of the turns marked in
    /// `include` (previous, current). Target values are copied out of the
    /// graph, so no gradient flows into them.
    pub fn collect(
        g: &Graph<T>,
        fused: &FusedRepresentation,
        features: (Var, Var),
        plans: (&SpeechMaskPlan, &SpeechMaskPlan),
        include: (bool, bool),
    ) -> Result<Self> {
        let turns = [
            (features.0, plans.0, include.0, fused.speech_prev_len, TurnSlot::Previous),
            (features.1, plans.1, include.1, fused.speech_cur_len, TurnSlot::Current),
        ];
        let mut fused_rows = Vec::new();
        let mut data = Vec::new();
        let mut dim = None;
        for (feat, plan, inc, len, slot) in turns {
            let value = g.value(feat);
            if plan.len() != len || value.rows() != len {
                return Err(SpectraError::Invalid(format!(
                    "{slot:?} turn: mask plan covers {} frames, features have {} and the fused sequence {len}",
                    plan.len(),
                    value.rows()
                )));
            }
            dim = Some(value.cols());
            if !inc {
                continue;
            }
            for j in plan.masked_indices() {
                fused_rows.push(match slot {
                    TurnSlot::Previous => fused.prev_frame(j),
                    TurnSlot::Current => fused.cur_frame(j),
                });
                data.extend_from_slice(value.row(j));
            }
        }
        let dim = dim.unwrap_or(0);
        Ok(CmamTargets {
            targets: Tensor::new(vec![fused_rows.len(), dim], data)?,
            fused_rows,
        })
    }
}

/// Mean absolute error over masked frames and channels; 0 when nothing is
/// masked.
pub fn cmam_loss<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    fused: &FusedRepresentation,
    targets: &CmamTargets<T>,
    head: &Linear,
) -> Result<Var> {
    if targets.is_empty() {
        return zero(g);
    }
    let speech = fused.speech_span();
    if let Some(&r) = targets.fused_rows.iter().find(|r| !speech.contains(r)) {
        return Err(SpectraError::Invalid(format!("CMAM row {r} lies outside the speech span {speech:?}")));
    }
    let h = g.gather_rows(fused.hidden, &targets.fused_rows)?;
    let pred = head.forward(g, store, h)?;
    Ok(g.mae(pred, &targets.targets)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(SpectraError::Config(format!("alpha {} must be finite and non-negative", self.alpha)));
        }
        Ok(())
    }

    /// `α·tpp + crs + cmlm + cmam` on plain numbers.
    pub fn combine(&self, tpp: f64, crs: f64, cmlm: f64, cmam: f64) -> f64 {
        self.alpha * tpp + crs + cmlm + cmam
    }
}

/// Loss terms of one forward pass; `None` marks a term that does not apply.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossComponents {
    pub tpp: Option<Var>,
    pub crs: Option<Var>,
    pub cmlm: Option<Var>,
    pub cmam: Option<Var>,
}

pub fn joint_loss<T: Float>(g: &mut Graph<T>, parts: &LossComponents, weights: &LossWeights) -> Result<Var> {
    let mut terms = Vec::with_capacity(4);
    if let Some(t) = parts.tpp {
        if weights.alpha != 0.0 {
            terms.push(g.scale(t, weights.alpha)?);
        }
    }
    terms.extend([parts.crs, parts.cmlm, parts.cmam].into_iter().flatten());
    let Some((&first, rest)) = terms.split_first() else {
        return zero(g);
    };
    let mut acc = first;
    for &t in rest {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}
