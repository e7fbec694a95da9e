use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{TokenizedInput, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextMaskConfig {
    pub prob: f64,
    pub mask_frac: f64,
    pub random_frac: f64,
}

impl Default for TextMaskConfig {
    fn default() -> Self {
        TextMaskConfig {
            prob: 0.15,
            mask_frac: 0.8,
            random_frac: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corruption {
    MaskToken,
    RandomToken(usize),
    Keep,
}

/// Positions chosen for masked language modeling, how each was corrupted
/// and the original ids to predict there.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TextMaskPlan {
    pub positions: Vec<usize>,
    pub corruptions: Vec<Corruption>,
    pub labels: Vec<usize>,
}

impl TextMaskPlan {
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    /// Token ids with the corruptions applied.
    pub fn apply(&self, ids: &[usize], vocab: &Vocab) -> Vec<usize> {
        let mut out = ids.to_vec();
        for (&p, c) in self.positions.iter().zip(&self.corruptions) {
            match *c {
                Corruption::MaskToken => out[p] = vocab.mask(),
                Corruption::RandomToken(id) => out[p] = id,
                Corruption::Keep => {}
            }
        }
        out
    }
}

/// Selects each non-special token independently with probability
/// `cfg.prob`, then replaces it with `<mask>`, a random ordinary token, or
/// leaves it, in proportions `mask_frac` / `random_frac` / rest.
pub fn mask_tokens(input: &TokenizedInput, vocab: &Vocab, rng: &mut impl Rng, cfg: &TextMaskConfig) -> TextMaskPlan {
    let mut plan = TextMaskPlan::default();
    let regular = vocab.regular_ids();
    for (pos, &id) in input.token_ids.iter().enumerate() {
        if vocab.is_special(id) {
            continue;
        }
        if rng.random::<f64>() >= cfg.prob {
            continue;
        }
        let t: f64 = rng.random();
        let corruption = if t < cfg.mask_frac {
            Corruption::MaskToken
        } else if t < cfg.mask_frac + cfg.random_frac && !regular.is_empty() {
            Corruption::RandomToken(rng.random_range(regular.clone()))
        } else {
            Corruption::Keep
        };
        plan.positions.push(pos);
        plan.corruptions.push(corruption);
        plan.labels.push(id);
    }
    plan
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(vocab: &Vocab, n: usize) -> TokenizedInput {
        let mut ids = vec![vocab.bos()];
        for i in 0..n {
            ids.push(4 + i % (vocab.len() - 4));
            if i % 7 == 6 {
                ids.push(vocab.eos());
            }
        }
        ids.push(vocab.eos());
        TokenizedInput {
            segment_ids: vec![0; ids.len()],
            position_ids: (0..ids.len()).collect(),
            token_ids: ids,
            word_boundaries: vec![],
            turn_spans: vec![],
            dropped_turns: 0,
        }
    }

    #[test]
    fn zero_probability_gives_empty_plan() {
        let v = Vocab::new((0..10).map(|i| format!("t{i}")));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = TextMaskConfig { prob: 0.0, ..Default::default() };
        assert!(mask_tokens(&input(&v, 100), &v, &mut rng, &cfg).is_empty());
    }

    #[test]
    fn rates_match_bernoulli_process() {
        let v = Vocab::new((0..20).map(|i| format!("t{i}")));
        let inp = input(&v, 100_000);
        let regular = inp.token_ids.iter().filter(|&&i| !v.is_special(i)).count();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let plan = mask_tokens(&inp, &v, &mut rng, &TextMaskConfig::default());
        let frac = plan.len() as f64 / regular as f64;
        assert!((frac - 0.15).abs() < 0.005, "{frac}");
        let n = plan.len() as f64;
        let count = |f: fn(&Corruption) -> bool| plan.corruptions.iter().filter(|c| f(c)).count() as f64 / n;
        assert!((count(|c| matches!(c, Corruption::MaskToken)) - 0.8).abs() < 0.01);
        assert!((count(|c| matches!(c, Corruption::RandomToken(_))) - 0.1).abs() < 0.01);
        assert!((count(|c| matches!(c, Corruption::Keep)) - 0.1).abs() < 0.01);
        for (&p, &l) in plan.positions.iter().zip(&plan.labels) {
            assert!(!v.is_special(inp.token_ids[p]));
            assert_eq!(inp.token_ids[p], l);
        }
        let applied = plan.apply(&inp.token_ids, &v);
        for (p, c) in plan.positions.iter().zip(&plan.corruptions) {
            if let Corruption::RandomToken(id) = c {
                assert!(!v.is_special(*id));
                assert_eq!(applied[*p], *id);
            }
        }
    }

    #[test]
    fn plan_is_pure_function_of_rng() {
        let v = Vocab::new((0..10).map(|i| format!("t{i}")));
        let inp = input(&v, 500);
        let a = mask_tokens(&inp, &v, &mut ChaCha8Rng::seed_from_u64(3), &TextMaskConfig::default());
        let b = mask_tokens(&inp, &v, &mut ChaCha8Rng::seed_from_u64(3), &TextMaskConfig::default());
        assert_eq!(a, b);
    }
}
