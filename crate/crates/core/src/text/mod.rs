//! Tokenization of the concatenated dialog text, token masking and the
//! summed text embedding.

mod embedding;
mod masking;

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::corpus::{Dialog, Sample, TurnSlot};
use crate::error::{Result, SpectraError};

pub use embedding::TextEmbedding;
pub use masking::{mask_tokens, Corruption, TextMaskConfig, TextMaskPlan};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const MASK: &str = "<mask>";
pub const PAD: &str = "<pad>";
const SPECIALS: [&str; 4] = [BOS, EOS, MASK, PAD];

/// Default cap on the token length of one sample's text.
pub const MAX_TEXT_LEN: usize = 512;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials first (`<s>`, `</s>`, `<mask>`, `<pad>`), then `words` in
    /// the given order; duplicates are dropped.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        for w in words {
            let w = w.into();
            if !index.contains_key(&w) {
                index.insert(w.clone(), tokens.len());
                tokens.push(w);
            }
        }
        Vocab { tokens, index }
    }

    /// Vocabulary of every transcript word in the corpus, sorted.
    pub fn from_dialogs(dialogs: &[Dialog]) -> Self {
        let words: BTreeSet<&str> = dialogs
            .iter()
            .flat_map(|d| &d.turns)
            .flat_map(|t| &t.words)
            .map(|w| w.word.as_str())
            .collect();
        Vocab::new(words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn bos(&self) -> usize {
        0
    }

    pub fn eos(&self) -> usize {
        1
    }

    pub fn mask(&self) -> usize {
        2
    }

    pub fn pad(&self) -> usize {
        3
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// Ids of ordinary (non-special) tokens.
    pub fn regular_ids(&self) -> std::ops::Range<usize> {
        SPECIALS.len()..self.tokens.len()
    }

    /// Writes the vocabulary file: a `#specials` header line followed by
    /// one ordinary token per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = format!("#specials {}\n", SPECIALS.join(" "));
        for t in &self.tokens[SPECIALS.len()..] {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out).map_err(SpectraError::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(SpectraError::io(path))?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let expected = format!("#specials {}", SPECIALS.join(" "));
        if header != expected {
            return Err(SpectraError::Invalid(format!(
                "{}: vocabulary header {header:?} does not match {expected:?}",
                path.display()
            )));
        }
        Ok(Vocab::new(lines.filter(|l| !l.is_empty())))
    }
}

/// Splits one transcript word into token ids.
pub trait Tokenizer {
    fn tokenize_word(&self, word: &str, vocab: &Vocab) -> Result<Vec<usize>>;
}

/// Word-level tokenizer: every whitespace-separated word is one token and
/// unknown words are an error.
#[derive(Clone, Copy, Debug, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize_word(&self, word: &str, vocab: &Vocab) -> Result<Vec<usize>> {
        word.split_whitespace()
            .map(|w| vocab.id(w).ok_or_else(|| SpectraError::OutOfVocabulary(w.to_string())))
            .collect()
    }
}

/// A word with a temporal target, mapped onto token positions.
#[derive(Clone, Debug, PartialEq)]
pub struct WordBoundary {
    pub first_token: usize,
    pub last_token: usize,
    pub start_time: f64,
    pub end_time: f64,
    pub slot: TurnSlot,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedInput {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub word_boundaries: Vec<WordBoundary>,
    /// Token range of each kept text turn, separators excluded.
    pub turn_spans: Vec<std::ops::Range<usize>>,
    /// History turns dropped to respect the length limit.
    pub dropped_turns: usize,
}

impl TokenizedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Lays out `<s> t_{i−k} </s> … </s> t_i </s>`. Segment id 1 marks the
/// tokens of `t_i` and the final `</s>`. If the text is longer than
/// `max_len`, whole history turns are dropped oldest first; the last two
/// turns are never cut.
pub fn tokenize_sample(sample: &Sample, vocab: &Vocab, tokenizer: &dyn Tokenizer, max_len: usize) -> Result<TokenizedInput> {
    let turns = &sample.text_turns;
    if turns.len() < 2 {
        return Err(SpectraError::Invalid(format!(
            "sample of dialog {} has {} text turns, need at least 2",
            sample.dialog_id,
            turns.len()
        )));
    }
    // per turn, per word token ids
    let per_turn: Vec<Vec<Vec<usize>>> = turns
        .iter()
        .map(|t| t.iter().map(|w| tokenizer.tokenize_word(w, vocab)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let turn_len = |t: &Vec<Vec<usize>>| t.iter().map(Vec::len).sum::<usize>();
    let mut first_kept = 0;
    let mut total: usize = 1 + per_turn.iter().map(|t| turn_len(t) + 1).sum::<usize>();
    while total > max_len && first_kept + 2 < per_turn.len() {
        total -= turn_len(&per_turn[first_kept]) + 1;
        first_kept += 1;
    }
    if total > max_len {
        return Err(SpectraError::TextTooLong { len: total, max: max_len });
    }

    let n_kept = per_turn.len() - first_kept;
    let mut token_ids = Vec::with_capacity(total);
    let mut segment_ids = Vec::with_capacity(total);
    let mut turn_spans = Vec::with_capacity(n_kept);
    // token ranges of each word of the last two turns
    let mut word_ranges: [Vec<(usize, usize)>; 2] = [Vec::new(), Vec::new()];
    token_ids.push(vocab.bos());
    segment_ids.push(0);
    for (k, turn) in per_turn[first_kept..].iter().enumerate() {
        let is_current = k + 1 == n_kept;
        let seg = usize::from(is_current);
        let start = token_ids.len();
        let last_two = (k + 2 >= n_kept).then(|| usize::from(is_current));
        for word in turn {
            let first = token_ids.len();
            token_ids.extend_from_slice(word);
            segment_ids.extend(std::iter::repeat_n(seg, word.len()));
            if let Some(slot) = last_two {
                word_ranges[slot].push((first, token_ids.len() - 1));
            }
        }
        turn_spans.push(start..token_ids.len());
        token_ids.push(vocab.eos());
        segment_ids.push(seg);
    }

    let mut word_boundaries = Vec::with_capacity(sample.tpp_words.len());
    for w in &sample.tpp_words {
        let slot_idx = match w.slot {
            TurnSlot::Previous => 0,
            TurnSlot::Current => 1,
        };
        let &(first, last) = word_ranges[slot_idx].get(w.word_index).ok_or_else(|| {
            SpectraError::Invalid(format!(
                "dialog {}: TPP word {} of {:?} turn has no tokens",
                sample.dialog_id, w.word_index, w.slot
            ))
        })?;
        word_boundaries.push(WordBoundary {
            first_token: first,
            last_token: last,
            start_time: w.start_time,
            end_time: w.end_time,
            slot: w.slot,
        });
    }
    let position_ids = (0..token_ids.len()).collect();
    Ok(TokenizedInput {
        token_ids,
        segment_ids,
        position_ids,
        word_boundaries,
        turn_spans,
        dropped_turns: first_kept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Substitution, TppWord};

    fn sample(turns: &[&[&str]]) -> Sample {
        let n = turns.len();
        let mut tpp = Vec::new();
        for (slot, t) in [(TurnSlot::Previous, turns[n - 2]), (TurnSlot::Current, turns[n - 1])] {
            for j in 0..t.len() {
                tpp.push(TppWord {
                    slot,
                    word_index: j,
                    start_time: j as f64 * 0.1,
                    end_time: j as f64 * 0.1 + 0.05,
                });
            }
        }
        Sample {
            dialog_id: "d".into(),
            target_turn_index: n,
            text_turns: turns.iter().map(|t| t.iter().map(|w| w.to_string()).collect()).collect(),
            sample_rate: 100,
            speech_prev: vec![0.0; 10].into(),
            speech_cur: vec![0.0; 10].into(),
            tpp_words: tpp,
            text_turn_lengths: (turns[n - 2].len(), turns[n - 1].len()),
            substitution: Substitution::default(),
        }
    }

    fn vocab() -> Vocab {
        Vocab::new(["a", "b", "c", "d", "e", "f", "g", "h"])
    }

    /// Splits every word into one token per character.
    struct CharTokenizer;

    impl Tokenizer for CharTokenizer {
        fn tokenize_word(&self, word: &str, vocab: &Vocab) -> Result<Vec<usize>> {
            word.chars()
                .map(|c| vocab.id(&c.to_string()).ok_or_else(|| SpectraError::OutOfVocabulary(c.to_string())))
                .collect()
        }
    }

    #[test]
    fn two_turns_of_three_words() {
        let s = sample(&[&["a", "b", "c"], &["d", "e", "f"]]);
        let t = tokenize_sample(&s, &vocab(), &WhitespaceTokenizer, MAX_TEXT_LEN).unwrap();
        assert_eq!(t.len(), 9);
        assert_eq!(t.segment_ids, vec![0, 0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(t.segment_ids.iter().sum::<usize>(), 3 + 1);
        assert_eq!(t.token_ids[0], 0);
        assert_eq!(t.token_ids[4], 1);
        assert_eq!(t.token_ids[8], 1);
        let b = &t.word_boundaries;
        assert_eq!(b.len(), 6);
        assert_eq!((b[0].first_token, b[0].last_token), (1, 1));
        assert_eq!((b[3].first_token, b[3].last_token), (5, 5));
        assert_eq!(b[3].slot, TurnSlot::Current);
    }

    #[test]
    fn eight_turns_have_eight_separators() {
        let turns: Vec<&[&str]> = vec![&["a", "b"]; 8];
        let t = tokenize_sample(&sample(&turns), &vocab(), &WhitespaceTokenizer, MAX_TEXT_LEN).unwrap();
        assert_eq!(t.token_ids.iter().filter(|&&i| i == 1).count(), 8);
        assert_eq!(t.token_ids.iter().filter(|&&i| i == 0).count(), 1);
        assert_eq!(t.turn_spans.len(), 8);
    }

    #[test]
    fn multi_token_words_map_to_token_ranges() {
        let s = sample(&[&["ab", "c"], &["def", "g"]]);
        let t = tokenize_sample(&s, &vocab(), &CharTokenizer, MAX_TEXT_LEN).unwrap();
        // <s> a b c </s> d e f g </s>
        assert_eq!(t.len(), 10);
        let b = &t.word_boundaries;
        assert_eq!((b[0].first_token, b[0].last_token), (1, 2));
        assert_eq!((b[1].first_token, b[1].last_token), (3, 3));
        assert_eq!((b[2].first_token, b[2].last_token), (5, 7));
        assert_eq!((b[3].first_token, b[3].last_token), (8, 8));
        assert_eq!(t.segment_ids.iter().sum::<usize>(), 4 + 1);
    }

    #[test]
    fn oov_word_is_named() {
        let s = sample(&[&["a"], &["zzz"]]);
        let err = tokenize_sample(&s, &vocab(), &WhitespaceTokenizer, MAX_TEXT_LEN).unwrap_err();
        assert!(err.to_string().contains("zzz"));
    }

    #[test]
    fn truncation_drops_oldest_history_first() {
        let turns: Vec<&[&str]> = vec![&["a", "b", "c"], &["d", "e"], &["f"], &["g", "h"]];
        let s = sample(&turns);
        // full length: 1 + 4 + 3 + 2 + 3 = 13
        let t = tokenize_sample(&s, &vocab(), &WhitespaceTokenizer, 8).unwrap();
        assert_eq!(t.dropped_turns, 2);
        assert_eq!(t.len(), 1 + 2 + 3);
        assert_eq!(t.token_ids[1], vocab().id("f").unwrap());
        let t = tokenize_sample(&s, &vocab(), &WhitespaceTokenizer, 9).unwrap();
        assert_eq!(t.dropped_turns, 1);
        assert!(matches!(
            tokenize_sample(&s, &vocab(), &WhitespaceTokenizer, 5),
            Err(SpectraError::TextTooLong { len: 6, max: 5 })
        ));
    }

    #[test]
    fn vocab_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = vocab();
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
        std::fs::write(&path, "a\nb\n").unwrap();
        assert!(Vocab::load(&path).is_err());
    }
}
