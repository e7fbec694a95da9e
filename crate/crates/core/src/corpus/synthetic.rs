//! Synthetic aligned dialogs.
//!
//! Every vocabulary word owns a fixed waveform signature of
//! `signature_period` samples. A spoken word is its signature repeated for a
//! whole number of periods, and words are separated by whole periods of
//! silence, so word boundaries fall on the frame grid of a front end whose
//! total stride equals the period. Each dialog draws its words from a single
//! topic (a contiguous block of the vocabulary), which gives turns of one
//! dialog a shared identity that substituted turns lack.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dialog, Turn, WordAlignment, MAX_TURN_SECONDS};
use crate::error::{Result, SpectraError};

const SIGNATURE_SEED: u64 = 0x5EC7_0A11;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_dialogs: usize,
    /// Inclusive range of turns per dialog.
    pub turns_per_dialog: (usize, usize),
    pub vocab_size: usize,
    /// Inclusive range of words per turn.
    pub words_per_turn_range: (usize, usize),
    /// Waveform values per second.
    pub frame_rate: u32,
    pub noise_std: f64,
    pub signature_period: usize,
    /// Inclusive range of signature repetitions per word.
    pub word_periods: (usize, usize),
    /// Silence between words, in periods (inclusive upper bound).
    pub max_gap_periods: usize,
    pub num_topics: usize,
    pub max_turn_seconds: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_dialogs: 64,
            turns_per_dialog: (3, 6),
            vocab_size: 64,
            words_per_turn_range: (3, 6),
            frame_rate: 100,
            noise_std: 0.05,
            signature_period: 10,
            word_periods: (2, 4),
            max_gap_periods: 1,
            num_topics: 16,
            max_turn_seconds: MAX_TURN_SECONDS,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SpectraError::Config(m.to_string()));
        if self.vocab_size < 8 {
            return bad("vocab_size must be at least 8");
        }
        if self.frame_rate < 10 {
            return bad("frame_rate must be at least 10 per second");
        }
        if self.num_topics == 0 || self.num_topics > self.vocab_size {
            return bad("num_topics must be in 1..=vocab_size");
        }
        if self.signature_period == 0 {
            return bad("signature_period must be positive");
        }
        let ranges = [self.turns_per_dialog, self.words_per_turn_range, self.word_periods];
        if ranges.iter().any(|&(lo, hi)| lo == 0 || lo > hi) {
            return bad("ranges must be non-empty and start at 1 or more");
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be non-negative");
        }
        let min_word = self.word_periods.0 * self.signature_period;
        if (self.max_turn_seconds * f64::from(self.frame_rate)) < min_word as f64 {
            return bad("max_turn_seconds cannot hold a single word");
        }
        Ok(())
    }

    pub fn words_per_topic(&self) -> usize {
        self.vocab_size / self.num_topics
    }
}

pub fn word_name(id: usize) -> String {
    format!("w{id:03}")
}

/// Topic of a synthetic word id, or `None` for ids outside every topic.
pub fn word_topic(word: &str, config: &SyntheticConfig) -> Option<usize> {
    let id: usize = word.strip_prefix('w')?.parse().ok()?;
    let t = id / config.words_per_topic();
    (t < config.num_topics).then_some(t)
}

/// The waveform signature of word `id`: a fixed pseudo-random pattern with
/// unit norm, scaled to an RMS amplitude of 0.5.
pub fn word_signature(id: usize, period: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(SIGNATURE_SEED ^ (id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let raw: Vec<f64> = (0..period).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let scale = 0.5 * (period as f64).sqrt() / norm;
    raw.iter().map(|v| (v * scale) as f32).collect()
}

/// Generates a corpus as a pure function of `config` and `seed`.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<Vec<Dialog>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let period = config.signature_period;
    let signatures: Vec<Vec<f32>> = (0..config.vocab_size).map(|v| word_signature(v, period)).collect();
    let noise = Normal::new(0.0, config.noise_std.max(f64::MIN_POSITIVE)).expect("valid normal");
    let rate = f64::from(config.frame_rate);
    let max_samples = (config.max_turn_seconds * rate).floor() as usize;
    let wpt = config.words_per_topic();
    let topic_offset = rng.random_range(0..config.num_topics);

    let mut dialogs = Vec::with_capacity(config.num_dialogs);
    for d in 0..config.num_dialogs {
        let topic = (d + topic_offset) % config.num_topics;
        let n_turns = rng.random_range(config.turns_per_dialog.0..=config.turns_per_dialog.1);
        let mut turns = Vec::with_capacity(n_turns);
        for t in 0..n_turns {
            let n_words = rng.random_range(config.words_per_turn_range.0..=config.words_per_turn_range.1);
            let mut wave: Vec<f32> = Vec::new();
            let mut words = Vec::with_capacity(n_words);
            let lead = rng.random_range(0..=config.max_gap_periods) * period;
            wave.resize(lead, 0.0);
            for _ in 0..n_words {
                let id = topic * wpt + rng.random_range(0..wpt);
                let reps = rng.random_range(config.word_periods.0..=config.word_periods.1);
                let gap = rng.random_range(0..=config.max_gap_periods) * period;
                let start = wave.len();
                let end = start + reps * period;
                // truncate at a word boundary
                if end > max_samples {
                    break;
                }
                for _ in 0..reps {
                    wave.extend_from_slice(&signatures[id]);
                }
                words.push(WordAlignment {
                    word: word_name(id),
                    start_time: start as f64 / rate,
                    end_time: end as f64 / rate,
                });
                wave.resize((end + gap).min(max_samples), 0.0);
            }
            if words.is_empty() {
                // the lead silence pushed even the first word out
                wave.clear();
                let id = topic * wpt + rng.random_range(0..wpt);
                let reps = config.word_periods.0;
                for _ in 0..reps {
                    wave.extend_from_slice(&signatures[id]);
                }
                words.push(WordAlignment {
                    word: word_name(id),
                    start_time: 0.0,
                    end_time: (reps * period) as f64 / rate,
                });
            }
            if config.noise_std > 0.0 {
                for v in &mut wave {
                    *v += noise.sample(&mut rng) as f32;
                }
            }
            turns.push(Turn {
                turn_index: t + 1,
                sample_rate: config.frame_rate,
                waveform: wave.into(),
                words,
            });
        }
        dialogs.push(Dialog {
            dialog_id: format!("syn-{seed}-{d:05}"),
            turns,
        });
    }
    Ok(dialogs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::validate_dialog;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SyntheticConfig {
            num_dialogs: 5,
            ..Default::default()
        };
        assert_eq!(generate_synthetic(&cfg, 0).unwrap(), generate_synthetic(&cfg, 0).unwrap());
        assert_ne!(generate_synthetic(&cfg, 0).unwrap(), generate_synthetic(&cfg, 1).unwrap());
    }

    #[test]
    fn noiseless_alignment_covers_signature_exactly() {
        let cfg = SyntheticConfig {
            num_dialogs: 6,
            noise_std: 0.0,
            ..Default::default()
        };
        for d in generate_synthetic(&cfg, 3).unwrap() {
            validate_dialog(&d, cfg.max_turn_seconds).unwrap();
            for turn in &d.turns {
                let mut covered = vec![false; turn.waveform.len()];
                for w in &turn.words {
                    let id: usize = w.word[1..].parse().unwrap();
                    let sig = word_signature(id, cfg.signature_period);
                    let s = (w.start_time * 100.0).round() as usize;
                    let e = (w.end_time * 100.0).round() as usize;
                    for (k, &v) in turn.waveform[s..e].iter().enumerate() {
                        assert_eq!(v, sig[k % sig.len()]);
                    }
                    covered[s..e].iter_mut().for_each(|c| *c = true);
                }
                for (v, c) in turn.waveform.iter().zip(&covered) {
                    if !c {
                        assert_eq!(*v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn words_stay_in_dialog_topic() {
        let cfg = SyntheticConfig {
            num_dialogs: 8,
            ..Default::default()
        };
        for d in generate_synthetic(&cfg, 11).unwrap() {
            let topics: std::collections::BTreeSet<_> = d
                .turns
                .iter()
                .flat_map(|t| &t.words)
                .map(|w| word_topic(&w.word, &cfg).unwrap())
                .collect();
            assert_eq!(topics.len(), 1);
        }
    }

    #[test]
    fn long_turns_are_truncated_at_word_boundaries() {
        let cfg = SyntheticConfig {
            num_dialogs: 4,
            words_per_turn_range: (30, 40),
            max_turn_seconds: 2.0,
            ..Default::default()
        };
        for d in generate_synthetic(&cfg, 2).unwrap() {
            validate_dialog(&d, 2.0).unwrap();
            for t in &d.turns {
                assert!(t.duration() <= 2.0);
                assert!(t.words.len() < 30);
            }
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let small = SyntheticConfig {
            vocab_size: 4,
            num_topics: 2,
            ..Default::default()
        };
        assert!(generate_synthetic(&small, 0).is_err());
        let slow = SyntheticConfig {
            frame_rate: 5,
            ..Default::default()
        };
        assert!(generate_synthetic(&slow, 0).is_err());
    }
}
