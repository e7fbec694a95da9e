//! Aligned spoken dialogs and the construction of pre-training samples.

mod shard;
mod synthetic;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpectraError};

pub use shard::{load_corpus, write_shards, Corpus, CorpusManifest, DialogRecord, ShardRecord, MANIFEST_VERSION};
pub use synthetic::{generate_synthetic, word_signature, word_topic, SyntheticConfig};

/// Default cap on a single turn's speech, in seconds.
pub const MAX_TURN_SECONDS: f64 = 10.0;

/// One transcript word and where it was spoken, in seconds from the start
/// of its own turn's waveform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordAlignment {
    pub word: String,
    pub start_time: f64,
    pub end_time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Turn {
    /// 1-based position of the turn in its dialog.
    pub turn_index: usize,
    pub sample_rate: u32,
    pub waveform: Arc<[f32]>,
    pub words: Vec<WordAlignment>,
}

impl Turn {
    pub fn duration(&self) -> f64 {
        self.waveform.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn transcript(&self) -> Vec<String> {
        self.words.iter().map(|w| w.word.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dialog {
    pub dialog_id: String,
    pub turns: Vec<Turn>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    EmptyTranscript,
    NegativeStart,
    EmptyInterval,
    ExceedsDuration,
    /// Words `j` and `j + 1` overlap.
    Overlap,
    /// Word `j + 1` starts before word `j`.
    Unsorted,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub word_index: usize,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let j = self.word_index;
        match self.kind {
            ViolationKind::EmptyTranscript => write!(f, "empty transcript"),
            ViolationKind::NegativeStart => write!(f, "word {j} starts before 0"),
            ViolationKind::EmptyInterval => write!(f, "word {j} does not end after it starts"),
            ViolationKind::ExceedsDuration => write!(f, "word {j} exceeds duration"),
            ViolationKind::Overlap => write!(f, "overlap at {j}, {}", j + 1),
            ViolationKind::Unsorted => write!(f, "unsorted at {j}, {}", j + 1),
        }
    }
}

/// Checks every word-alignment invariant of a turn and reports all
/// violations with their word indices.
pub fn validate_alignment(turn: &Turn) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    if turn.words.is_empty() {
        out.push(Violation {
            word_index: 0,
            kind: ViolationKind::EmptyTranscript,
        });
    }
    let duration = turn.duration();
    for (j, w) in turn.words.iter().enumerate() {
        if w.start_time < 0.0 {
            out.push(Violation {
                word_index: j,
                kind: ViolationKind::NegativeStart,
            });
        }
        if w.start_time.partial_cmp(&w.end_time) != Some(std::cmp::Ordering::Less) {
            out.push(Violation {
                word_index: j,
                kind: ViolationKind::EmptyInterval,
            });
        }
        if w.end_time > duration {
            out.push(Violation {
                word_index: j,
                kind: ViolationKind::ExceedsDuration,
            });
        }
    }
    for (j, pair) in turn.words.windows(2).enumerate() {
        if pair[1].start_time < pair[0].start_time {
            out.push(Violation {
                word_index: j,
                kind: ViolationKind::Unsorted,
            });
        } else if pair[1].start_time < pair[0].end_time {
            out.push(Violation {
                word_index: j,
                kind: ViolationKind::Overlap,
            });
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// Validates every turn of a dialog, including the duration cap.
pub fn validate_dialog(dialog: &Dialog, max_turn_seconds: f64) -> Result<()> {
    for turn in &dialog.turns {
        validate_alignment(turn).map_err(|violations| SpectraError::InvalidAlignment {
            dialog_id: dialog.dialog_id.clone(),
            turn_index: turn.turn_index,
            violations,
        })?;
        if turn.duration() > max_turn_seconds + 1e-9 {
            return Err(SpectraError::InvalidTurn {
                dialog_id: dialog.dialog_id.clone(),
                turn_index: turn.turn_index,
                msg: format!("duration {:.3}s exceeds {max_turn_seconds}s", turn.duration()),
            });
        }
    }
    Ok(())
}

/// Which of the two speech-bearing turns a word belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TurnSlot {
    /// Turn `i − 1`.
    Previous,
    /// Turn `i`, the current utterance.
    Current,
}

/// A word carrying a temporal-position target: times are relative to the
/// start of its own turn's waveform.
#[derive(Clone, Debug, PartialEq)]
pub struct TppWord {
    pub slot: TurnSlot,
    pub word_index: usize,
    pub start_time: f64,
    pub end_time: f64,
}

/// Which parts of a sample were swapped for material from another dialog.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Substitution {
    pub text: bool,
    pub speech: bool,
}

/// One pre-training instance: the current turn, up to `k` turns of textual
/// history, and the speech of the last two turns.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub dialog_id: String,
    pub target_turn_index: usize,
    /// Transcripts in temporal order; the last two are turns `i − 1`, `i`.
    pub text_turns: Vec<Vec<String>>,
    pub sample_rate: u32,
    pub speech_prev: Arc<[f32]>,
    pub speech_cur: Arc<[f32]>,
    pub tpp_words: Vec<TppWord>,
    /// Word counts of turns `i − 1` and `i`.
    pub text_turn_lengths: (usize, usize),
    pub substitution: Substitution,
}

impl Sample {
    pub fn current_text(&self) -> &[String] {
        self.text_turns.last().expect("sample has text turns")
    }
}

fn tpp_words_of(turn: &Turn, slot: TurnSlot) -> impl Iterator<Item = TppWord> + '_ {
    turn.words.iter().enumerate().map(move |(j, w)| TppWord {
        slot,
        word_index: j,
        start_time: w.start_time,
        end_time: w.end_time,
    })
}

/// Builds one sample per turn `i ≥ 2` of the dialog, with
/// `min(k, i − 1)` history turns. A dialog with fewer than two turns yields
/// no samples.
pub fn build_samples(dialog: &Dialog, k: usize) -> Result<Vec<Sample>> {
    if k == 0 {
        return Err(SpectraError::Config("history length k must be at least 1".into()));
    }
    for turn in &dialog.turns {
        validate_alignment(turn).map_err(|violations| SpectraError::InvalidAlignment {
            dialog_id: dialog.dialog_id.clone(),
            turn_index: turn.turn_index,
            violations,
        })?;
    }
    let turns = &dialog.turns;
    let mut samples = Vec::with_capacity(turns.len().saturating_sub(1));
    for pos in 1..turns.len() {
        let history = k.min(pos);
        let prev = &turns[pos - 1];
        let cur = &turns[pos];
        samples.push(Sample {
            dialog_id: dialog.dialog_id.clone(),
            target_turn_index: cur.turn_index,
            text_turns: turns[pos - history..=pos].iter().map(Turn::transcript).collect(),
            sample_rate: cur.sample_rate,
            speech_prev: prev.waveform.clone(),
            speech_cur: cur.waveform.clone(),
            tpp_words: tpp_words_of(prev, TurnSlot::Previous)
                .chain(tpp_words_of(cur, TurnSlot::Current))
                .collect(),
            text_turn_lengths: (prev.word_count(), cur.word_count()),
            substitution: Substitution::default(),
        });
    }
    Ok(samples)
}
